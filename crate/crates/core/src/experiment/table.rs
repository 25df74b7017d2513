use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

pub const COLUMNS: [&str; 19] = [
    "experiment",
    "n",
    "m",
    "S",
    "A",
    "H",
    "d",
    "K",
    "seed",
    "mode",
    "measured_error",
    "bound_inf",
    "bound_fin",
    "dis",
    "emp_dis",
    "conc_coeff",
    "runtime_ms",
    "config_hash",
    "version",
];

/// One CSV row. `seed` holds the seed index, or `median` / `iqr` for
/// aggregate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub a: usize,
    pub h: usize,
    pub d: usize,
    pub k: usize,
    pub seed: String,
    pub mode: String,
    pub measured_error: f64,
    pub bound_inf: f64,
    pub bound_fin: f64,
    pub dis: f64,
    pub emp_dis: f64,
    pub conc_coeff: f64,
    pub runtime_ms: Option<f64>,
}

impl Row {
    fn cell_key(&self) -> (String, usize, usize, usize, usize, usize, usize, usize, String) {
        (
            self.experiment.clone(),
            self.n,
            self.m,
            self.s,
            self.a,
            self.h,
            self.d,
            self.k,
            self.mode.clone(),
        )
    }

    fn metrics(&self) -> [f64; 6] {
        [
            self.measured_error,
            self.bound_inf,
            self.bound_fin,
            self.dis,
            self.emp_dis,
            self.conc_coeff,
        ]
    }
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

fn median_and_iqr(values: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile(&v, 0.25), quantile(&v, 0.75));
    let iqr = if lo == hi { 0.0 } else { hi - lo };
    (quantile(&v, 0.5), iqr)
}

/// Median and IQR rows per grid cell, in first-appearance order of the cells.
pub fn aggregate_rows(rows: &[Row]) -> Vec<Row> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<_, Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let key = r.cell_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::with_capacity(2 * order.len());
    for key in order {
        let members = &groups[&key];
        let mut med = members[0].clone();
        let mut iqr = members[0].clone();
        med.seed = "median".into();
        iqr.seed = "iqr".into();
        let mut stats = [(0.0, 0.0); 6];
        for (i, s) in stats.iter_mut().enumerate() {
            let column: Vec<f64> = members.iter().map(|r| r.metrics()[i]).collect();
            *s = median_and_iqr(&column);
        }
        for (row, pick) in [(&mut med, 0usize), (&mut iqr, 1)] {
            let v = |i: usize| if pick == 0 { stats[i].0 } else { stats[i].1 };
            row.measured_error = v(0);
            row.bound_inf = v(1);
            row.bound_fin = v(2);
            row.dis = v(3);
            row.emp_dis = v(4);
            row.conc_coeff = v(5);
            let times: Vec<f64> = members.iter().filter_map(|r| r.runtime_ms).collect();
            row.runtime_ms = (!times.is_empty()).then(|| {
                let (m, q) = median_and_iqr(&times);
                if pick == 0 {
                    m
                } else {
                    q
                }
            });
        }
        out.push(med);
        out.push(iqr);
    }
    out
}

/// Shortest round-trip representation; `inf` and `NaN` spelled out.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x}")
    }
}

/// A finished experiment: per-seed rows, aggregate rows and header notes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Row>,
    /// `key=value` pairs written as `#` comment lines before the header.
    pub notes: Vec<(String, String)>,
    pub violations: Vec<String>,
    pub config_hash: String,
    pub version: String,
}

impl ExperimentTable {
    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.notes {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# violations={}", self.violations.len());
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for r in self.rows.iter().chain(&self.aggregates) {
            let fields = [
                r.experiment.clone(),
                r.n.to_string(),
                r.m.to_string(),
                r.s.to_string(),
                r.a.to_string(),
                r.h.to_string(),
                r.d.to_string(),
                r.k.to_string(),
                r.seed.clone(),
                r.mode.clone(),
                fmt_float(r.measured_error),
                fmt_float(r.bound_inf),
                fmt_float(r.bound_fin),
                fmt_float(r.dis),
                fmt_float(r.emp_dis),
                fmt_float(r.conc_coeff),
                r.runtime_ms.map(fmt_float).unwrap_or_default(),
                self.config_hash.clone(),
                self.version.clone(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: usize, err: f64) -> Row {
        Row {
            experiment: "x".into(),
            n: 1,
            m: 1,
            s: 1,
            a: 1,
            h: 1,
            d: 2,
            k: 0,
            seed: seed.to_string(),
            mode: "infinite".into(),
            measured_error: err,
            bound_inf: 1.0,
            bound_fin: f64::NAN,
            dis: 0.0,
            emp_dis: 0.0,
            conc_coeff: f64::INFINITY,
            runtime_ms: None,
        }
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn aggregates_per_cell() {
        let rows: Vec<Row> = (0..5).map(|i| row(i, i as f64)).collect();
        let agg = aggregate_rows(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].measured_error, 2.0);
        assert_eq!(agg[1].measured_error, 2.0);
        assert!(agg[0].conc_coeff.is_infinite());
        assert_eq!(agg[1].conc_coeff, 0.0);
        assert!(agg[0].bound_fin.is_nan());
    }

    #[test]
    fn csv_layout() {
        let t = ExperimentTable {
            rows: vec![row(0, 0.5)],
            aggregates: vec![],
            notes: vec![("C".into(), "1".into())],
            violations: vec![],
            config_hash: "abc".into(),
            version: "v0".into(),
        };
        let csv = t.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# C=1");
        assert_eq!(lines[1], "# violations=0");
        assert!(lines[2].starts_with("experiment,n,m,S,A,H,d,K,seed,mode,measured_error,bound_inf,bound_fin,dis,emp_dis,conc_coeff,runtime_ms"));
        assert_eq!(lines[3], "x,1,1,1,1,1,2,0,0,infinite,0.5,1,NaN,0,0,inf,,abc,v0");
    }
}
