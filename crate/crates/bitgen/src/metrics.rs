//! Line-delimited metric records: one self-describing JSON object per event.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub struct MetricWriter<W: Write> {
    out: W,
}

impl MetricWriter<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(MetricWriter { out: std::io::BufWriter::new(file) })
    }
}

impl<W: Write> MetricWriter<W> {
    pub fn new(out: W) -> Self {
        MetricWriter { out }
    }

    pub fn write<T: serde::Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("metric record serializes");
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_one_json_object_per_line() {
        let mut buf = Vec::new();
        {
            let mut w = MetricWriter::new(&mut buf);
            w.write(&serde_json::json!({"event": "a", "step": 1})).unwrap();
            w.write(&serde_json::json!({"event": "b", "loss": 0.5})).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("event").is_some());
        }
    }
}
