//! Structured progress lines: one JSON object per event on stderr.

use std::io::Write;

use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct LogEvent<'a> {
    pub phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub metric: &'a str,
    pub value: f64,
}

impl LogEvent<'_> {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log events serialize")
    }
}

/// Where pipeline progress goes. The silent logger drops everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Logger {
    enabled: bool,
}

impl Logger {
    pub fn stderr() -> Self {
        Self { enabled: true }
    }

    pub fn silent() -> Self {
        Self { enabled: false }
    }

    pub fn event(&self, phase: &str, step: Option<usize>, metric: &str, value: f64) {
        if !self.enabled {
            return;
        }
        let line = LogEvent {
            phase,
            step,
            metric,
            value,
        }
        .to_line();
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    pub fn metric(&self, phase: &str, metric: &str, value: f64) {
        self.event(phase, None, metric, value);
    }

    pub fn warn(&self, phase: &str, message: &str) {
        if self.enabled {
            let line = serde_json::json!({ "phase": phase, "warning": message });
            let _ = writeln!(std::io::stderr().lock(), "{line}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_required_fields() {
        let v: serde_json::Value = serde_json::from_str(
            &LogEvent {
                phase: "rl",
                step: Some(3),
                metric: "wm_success_rate",
                value: 0.5,
            }
            .to_line(),
        )
        .unwrap();
        assert_eq!(v["phase"], "rl");
        assert_eq!(v["step"], 3);
        assert_eq!(v["metric"], "wm_success_rate");
        assert_eq!(v["value"], 0.5);
    }
}
