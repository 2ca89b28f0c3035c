use std::fmt::Write as _;

/// Reference ablation values (mIoU %, full row then drops) shown next to
/// measured rows; never compared against.
pub const REFERENCE_ABLATION: [(&str, f64); 6] =
    [("full", 49.2), ("cmpg", -6.7), ("rct_semantic_expansion", -4.0), ("fai", -3.2), ("fai.cdfa", -1.0), ("fai.sqfe", -2.4)];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// `full` or the name of the disabled switch.
    pub label: String,
    pub miou: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// `(dataset, shots, mIoU)` cells.
    pub cells: Vec<(String, usize, f64)>,
    pub rows: Vec<ReportRow>,
}

fn reference(label: &str) -> Option<f64> {
    REFERENCE_ABLATION.iter().find(|(l, _)| *l == label).map(|(_, v)| *v)
}

impl EvalReport {
    pub fn add_cell(&mut self, dataset: &str, shots: usize, miou: f64) {
        self.cells.push((dataset.to_string(), shots, miou));
    }

    /// Adds an ablation row; the first row added is the full model.
    pub fn add_row(&mut self, label: &str, miou: f64) {
        let base = self.rows.first().map_or(miou, |r| r.miou);
        self.rows.push(ReportRow { label: label.to_string(), miou, delta: miou - base });
    }

    pub fn shot_counts(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.1).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn datasets(&self) -> Vec<&str> {
        let mut d: Vec<&str> = Vec::new();
        for (name, _, _) in &self.cells {
            if !d.contains(&name.as_str()) {
                d.push(name);
            }
        }
        d
    }

    pub fn cell(&self, dataset: &str, shots: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.0 == dataset && c.1 == shots).map(|c| c.2)
    }

    /// Mean over datasets at a shot count.
    pub fn average(&self, shots: usize) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.1 == shots).map(|c| c.2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Aligned plain-text tables, mIoU in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        if !self.cells.is_empty() {
            let shots = self.shot_counts();
            let mut header = format!("{:<16}", "shots");
            for d in self.datasets() {
                let _ = write!(header, "{d:>16}");
            }
            let _ = write!(header, "{:>10}", "Average");
            let _ = writeln!(out, "{header}");
            for k in shots {
                let mut line = format!("{:<16}", format!("{k}-shot"));
                for d in self.datasets() {
                    match self.cell(d, k) {
                        Some(v) => {
                            let _ = write!(line, "{:>16.1}", 100.0 * v);
                        }
                        None => {
                            let _ = write!(line, "{:>16}", "-");
                        }
                    }
                }
                let _ = write!(line, "{:>10.1}", 100.0 * self.average(k).unwrap_or(f64::NAN));
                let _ = writeln!(out, "{line}");
            }
        }
        if !self.rows.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "{:<26}{:>8}{:>8}{:>12}", "disabled", "mIoU", "delta", "reference");
            for r in &self.rows {
                let refv = reference(&r.label).map_or("-".to_string(), |v| format!("{v:.1}"));
                let _ = writeln!(out, "{:<26}{:>8.1}{:>8.1}{:>12}", r.label, 100.0 * r.miou, 100.0 * r.delta, refv);
            }
        }
        out
    }

    /// One `key=value` record per line.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (d, k, v) in &self.cells {
            let _ = writeln!(out, "kind=cell dataset={d} shots={k} miou={v:.6}");
        }
        for k in self.shot_counts() {
            let _ = writeln!(out, "kind=average shots={k} miou={:.6}", self.average(k).unwrap_or(f64::NAN));
        }
        for r in &self.rows {
            let _ = writeln!(out, "kind=ablation label={} miou={:.6} delta={:.6}", r.label, r.miou, r.delta);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_match_recomputation() {
        let mut r = EvalReport::default();
        r.add_cell("source-heldout", 1, 0.71);
        r.add_cell("target-test", 1, 0.52);
        r.add_cell("source-heldout", 5, 0.74);
        r.add_cell("target-test", 5, 0.55);
        assert!((r.average(1).unwrap() - (0.71 + 0.52) / 2.0).abs() < 1e-6);
        let recomputed: f64 = r.cells.iter().filter(|c| c.1 == 5).map(|c| c.2).sum::<f64>() / 2.0;
        assert!((r.average(5).unwrap() - recomputed).abs() < 1e-6);
        assert!(r.table().contains("Average"));
        assert!(r.records().contains("kind=average shots=5"));
    }

    #[test]
    fn full_row_has_zero_delta() {
        let mut r = EvalReport::default();
        r.add_row("full", 0.6);
        r.add_row("cmpg", 0.5);
        assert_eq!(r.rows[0].delta, 0.0);
        assert!((r.rows[1].delta + 0.1).abs() < 1e-12);
        assert!(r.table().contains("49.2"));
    }
}
