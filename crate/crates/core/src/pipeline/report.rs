//! Plot-ready CSVs and a plain-text summary from stage artifacts.

use std::fmt::Write;
use std::path::Path;

use super::run::{read_json, RankOutput, RANK_FILE, SEARCH_FILE, SWEEP_FILE};
use crate::error::{Error, Result};
use crate::rank::RankReport;
use crate::symbolic::SearchState;
use crate::train::SweepResult;

pub const SUMMARY_FILE: &str = "summary.txt";
pub const FRACTIONS_FILE: &str = "explained_variance.csv";
pub const NEFF_FILE: &str = "n_eff.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

fn optional<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<Option<T>> {
    match read_json(dir, file) {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingArtifact(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Plain-text summary of whichever stage outputs are given.
pub fn summary(rank: Option<&RankOutput>, search: Option<&SearchState>) -> String {
    let mut s = String::new();
    let system = rank.map(|r| r.system.clone()).or_else(|| search.map(|x| x.system.clone())).unwrap_or_default();
    let _ = writeln!(s, "system: {system}");
    if let Some(r) = rank {
        let _ = writeln!(s, "nets: {}", r.n_nets);
        if let Some(d) = &r.differential {
            let _ = writeln!(s, "n_c = {}", d.k_d);
            let _ = writeln!(s, "rank points: {} (degenerate {})", d.per_point_rank.len(), d.degenerate_points);
        }
        if let Some(m) = &r.manifold {
            match m.plateau {
                Some(p) => {
                    let _ = writeln!(s, "manifold n_c = {p}");
                }
                None => {
                    let _ = writeln!(s, "manifold n_c: no plateau");
                }
            }
        }
    }
    if let Some(st) = search {
        let status = if st.complete { "complete".to_string() } else { format!("incomplete ({})", st.stop_reason) };
        let c = &st.counters;
        let _ = writeln!(
            s,
            "search: {status}, enumerated {}, fast-rejected {}, fully-rejected {}, duplicate {}, dependent {}",
            c.enumerated, c.fast_rejected, c.fully_rejected, c.duplicate_rejected, c.dependent_rejected
        );
        if st.accepted.is_empty() {
            let _ = writeln!(s, "no formulas accepted");
        } else {
            let _ = writeln!(s, "accepted formulas:");
            for (i, f) in st.accepted.iter().enumerate() {
                let _ = writeln!(s, "  H{} = {}    {}    max residual {:.3e}", i + 1, f.rpn, f.infix, f.max_residual);
            }
        }
    }
    s
}

/// Explained-variance, n_eff and sweep CSVs plus `summary.txt`.
pub fn emit_report(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let rank: Option<RankOutput> = optional(dir, RANK_FILE)?;
    let search: Option<SearchState> = optional(dir, SEARCH_FILE)?;
    let sweep: Option<SweepResult> = optional(dir, SWEEP_FILE)?;
    if rank.is_none() && search.is_none() && sweep.is_none() {
        return Err(Error::MissingArtifact(format!(
            "{}: no {RANK_FILE}, {SEARCH_FILE} or {SWEEP_FILE}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    if let Some(r) = &rank {
        if let Some(d) = &r.differential {
            out.push((FRACTIONS_FILE.to_string(), d.fractions_csv().into_bytes()));
        }
        if let Some(m) = &r.manifold {
            let rep = RankReport { manifold: Some(m.clone()), ..Default::default() };
            out.push((NEFF_FILE.to_string(), rep.n_eff_csv().into_bytes()));
        }
    }
    if let Some(sw) = &sweep {
        out.push((SWEEP_CSV.to_string(), sw.to_csv().into_bytes()));
    }
    out.push((SUMMARY_FILE.to_string(), summary(rank.as_ref(), search.as_ref()).into_bytes()));
    Ok(out)
}
