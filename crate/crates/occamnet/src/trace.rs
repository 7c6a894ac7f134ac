//! Gate traces and their rendering. The HTML view highlights each token
//! with a background whose alpha equals the word-gate value and dims each
//! fact group's text by its fact-gate value; the ANSI view uses an 8-step
//! grayscale ramp. Both are deterministic byte-for-byte for a fixed trace.

use std::fmt;
use std::fmt::Write as _;

#[derive(Debug, PartialEq)]
pub enum TraceError {
    GateOutOfRange { index: usize, value: f64 },
    FactGateOutOfRange { group: usize, value: f64 },
    GroupLenMismatch { grouped: usize, units: usize },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::GateOutOfRange { index, value } => {
                write!(f, "gate {index} is {value}, outside [0, 1]")
            }
            TraceError::FactGateOutOfRange { group, value } => {
                write!(f, "fact gate {group} is {value}, outside [0, 1]")
            }
            TraceError::GroupLenMismatch { grouped, units } => {
                write!(f, "groups cover {grouped} units but the trace has {units}")
            }
        }
    }
}

impl std::error::Error for TraceError {}

/// A run of consecutive units sharing one fact gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactGroup {
    pub len: usize,
    pub gate: f64,
}

/// Per-token gate activations from one forward pass, with optional fact
/// grouping for hierarchical models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateTrace {
    pub task: String,
    pub checkpoint_id: String,
    pub example_id: String,
    pub units: Vec<(String, f64)>,
    pub groups: Option<Vec<FactGroup>>,
}

impl GateTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        for (i, (_, g)) in self.units.iter().enumerate() {
            if !(0.0..=1.0).contains(g) {
                return Err(TraceError::GateOutOfRange {
                    index: i,
                    value: *g,
                });
            }
        }
        if let Some(groups) = &self.groups {
            for (i, fg) in groups.iter().enumerate() {
                if !(0.0..=1.0).contains(&fg.gate) {
                    return Err(TraceError::FactGateOutOfRange {
                        group: i,
                        value: fg.gate,
                    });
                }
            }
            let grouped: usize = groups.iter().map(|fg| fg.len).sum();
            if grouped != self.units.len() {
                return Err(TraceError::GroupLenMismatch {
                    grouped,
                    units: self.units.len(),
                });
            }
        }
        Ok(())
    }

    /// Groups when present, else one group spanning every unit at full
    /// opacity.
    fn effective_groups(&self) -> Vec<FactGroup> {
        match &self.groups {
            Some(groups) => groups.clone(),
            None => vec![FactGroup {
                len: self.units.len(),
                gate: 1.0,
            }],
        }
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Static single-page report with inline styles only. Token highlight alpha
/// equals the word gate; group text opacity equals the fact gate; numeric
/// values ride along in `title` attributes.
pub fn render_html(trace: &GateTrace) -> Result<String, TraceError> {
    trace.validate()?;
    let mut out = String::new();
    out.push_str("<!doctype html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>gate trace</title>\n</head>\n");
    out.push_str(
        "<body style=\"font-family: monospace; background: #ffffff; color: #111111; \
         max-width: 60em; margin: 2em auto; line-height: 1.8;\">\n",
    );
    let _ = writeln!(
        out,
        "<p style=\"color: #555555;\">task: {} | checkpoint: {} | example: {}</p>",
        escape_html(&trace.task),
        escape_html(&trace.checkpoint_id),
        escape_html(&trace.example_id),
    );

    let mut pos = 0usize;
    for (gi, group) in trace.effective_groups().iter().enumerate() {
        let _ = write!(
            out,
            "<p style=\"opacity: {:.4};\" title=\"fact gate {:.4}\">",
            group.gate, group.gate
        );
        if trace.groups.is_some() {
            let _ = write!(out, "<b>fact {}:</b> ", gi + 1);
        }
        for (token, gate) in &trace.units[pos..pos + group.len] {
            let _ = write!(
                out,
                "<span style=\"background: rgba(255, 215, 0, {gate:.4});\" \
                 title=\"word gate {gate:.4}\">{}</span> ",
                escape_html(token)
            );
        }
        out.push_str("</p>\n");
        pos += group.len;
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

/// Gate value to one of 8 grayscale background steps.
fn ansi_step(gate: f64) -> usize {
    ((gate * 8.0).floor() as usize).min(7)
}

/// Terminal rendering: 8-step background ramp plus the bracketed value.
pub fn render_ansi(trace: &GateTrace) -> Result<String, TraceError> {
    trace.validate()?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "task: {} | checkpoint: {} | example: {}",
        trace.task, trace.checkpoint_id, trace.example_id
    );
    let mut pos = 0usize;
    for (gi, group) in trace.effective_groups().iter().enumerate() {
        if trace.groups.is_some() {
            let _ = write!(out, "fact {} [{:.2}]: ", gi + 1, group.gate);
        }
        for (token, gate) in &trace.units[pos..pos + group.len] {
            let step = ansi_step(*gate);
            let bg = 232 + 3 * step;
            let fg = if step >= 4 { 16 } else { 255 };
            let _ = write!(out, "\x1b[48;5;{bg}m\x1b[38;5;{fg}m{token}\x1b[0m[{gate:.2}] ");
        }
        out.push('\n');
        pos += group.len;
    }
    Ok(out)
}
