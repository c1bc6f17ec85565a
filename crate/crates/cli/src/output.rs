use std::io::Write;

use anyhow::Result;
use serde::Serialize;

/// JSON lines on stdout, or indented JSON / tables with `--pretty`.
pub struct Out {
    pretty: bool,
    stdout: std::io::StdoutLock<'static>,
}

impl Out {
    pub fn new(pretty: bool) -> Self {
        Out {
            pretty,
            stdout: std::io::stdout().lock(),
        }
    }

    pub fn pretty(&self) -> bool {
        self.pretty
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let text = if self.pretty {
            serde_json::to_string_pretty(value)?
        } else {
            serde_json::to_string(value)?
        };
        writeln!(self.stdout, "{text}")?;
        Ok(())
    }

    /// Prints `table` with `--pretty`, otherwise one JSON line per record.
    pub fn records<T: Serialize>(&mut self, values: &[T], table: impl FnOnce() -> String) -> Result<()> {
        if self.pretty {
            write!(self.stdout, "{}", table())?;
        } else {
            for v in values {
                writeln!(self.stdout, "{}", serde_json::to_string(v)?)?;
            }
        }
        Ok(())
    }

    pub fn text(&mut self, text: &str) -> Result<()> {
        write!(self.stdout, "{text}")?;
        Ok(())
    }
}

pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    parts.join(" ")
}
