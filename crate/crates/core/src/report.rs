//! Plain CSV output: one header line, floats with 17 significant digits.

use std::io::Write;

use crate::error::Result;

/// Round-trip exact float formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A table that can be written as CSV.
pub trait CsvTable {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;

    fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for row in self.rows() {
            out.write_record(row)?;
        }
        out.flush()?;
        Ok(())
    }

    fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
