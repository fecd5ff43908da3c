//! CSV helpers: comma separated, header row, LF endings, floats with 17
//! significant digits.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::systems::SampleBatch;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Render rows made of leading text cells followed by float cells.
pub fn table<I>(header: &[String], rows: I) -> String
where
    I: IntoIterator<Item = (Vec<String>, Vec<f64>)>,
{
    let mut out = header.join(",");
    out.push('\n');
    for (text, nums) in rows {
        let cells: Vec<String> = text.into_iter().chain(nums.into_iter().map(fmt_f64)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn batch_to_csv(b: &SampleBatch) -> String {
    table(&b.labels, b.points.rows().into_iter().map(|r| (vec![], r.to_vec())))
}

pub fn batch_from_csv(text: &str, system: &str, seed: u64) -> Result<SampleBatch> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Numerical("empty sample CSV".into()))?;
    let labels: Vec<String> = header.split(',').map(String::from).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, l) in lines.enumerate() {
        if l.is_empty() {
            continue;
        }
        let vals = l
            .split(',')
            .map(|c| c.parse::<f64>().map_err(|e| Error::Numerical(format!("sample CSV row {}: {e}", i + 2))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != labels.len() {
            return Err(Error::Dimension { expected: labels.len(), got: vals.len() });
        }
        data.extend(vals);
        rows += 1;
    }
    let points = Array2::from_shape_vec((rows, labels.len()), data).expect("shape checked");
    Ok(SampleBatch { system: system.to_string(), seed, labels, points })
}
