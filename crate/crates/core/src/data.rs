//! Per-net feature records, CSV dataset I/O, feature-set selection and the
//! train/validation/test split.
//!
//! CSV layout (UTF-8, header row required):
//!
//! ```text
//! net_id,x_um,y_um,resistance_ohm,p_total_w,i_peak_a,i_avg_a,t_rise_s,t_fall_s,tau_s[,ir_drop_mv]
//! ```
//!
//! The label column is optional; an empty label cell means "unlabelled".

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Column names of the required CSV fields, in file order.
pub const CSV_COLUMNS: [&str; 10] = [
    "net_id",
    "x_um",
    "y_um",
    "resistance_ohm",
    "p_total_w",
    "i_peak_a",
    "i_avg_a",
    "t_rise_s",
    "t_fall_s",
    "tau_s",
];

/// Name of the optional label column.
pub const LABEL_COLUMN: &str = "ir_drop_mv";

/// One net / cell instance with its electrical, timing and physical features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub net_id: u64,
    pub x_um: f64,
    pub y_um: f64,
    pub resistance_ohm: f64,
    pub p_total_w: f64,
    pub i_peak_a: f64,
    pub i_avg_a: f64,
    pub t_rise_s: f64,
    pub t_fall_s: f64,
    pub tau_s: f64,
    pub ir_drop_mv: Option<f64>,
}

impl NetRecord {
    pub fn validate(&self) -> Result<()> {
        let id = self.net_id;
        let fields = [
            self.x_um,
            self.y_um,
            self.resistance_ohm,
            self.p_total_w,
            self.i_peak_a,
            self.i_avg_a,
            self.t_rise_s,
            self.t_fall_s,
            self.tau_s,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("net {id}: non-finite field")));
        }
        if self.resistance_ohm <= 0.0 {
            return Err(Error::validation(format!(
                "net {id}: resistance must be positive, got {}",
                self.resistance_ohm
            )));
        }
        if !(self.i_avg_a >= 0.0 && self.i_peak_a >= self.i_avg_a) {
            return Err(Error::validation(format!(
                "net {id}: need i_peak >= i_avg >= 0, got i_peak={} i_avg={}",
                self.i_peak_a, self.i_avg_a
            )));
        }
        if self.t_rise_s < 0.0 || self.t_fall_s < 0.0 || self.tau_s < 0.0 {
            return Err(Error::validation(format!("net {id}: negative timing field")));
        }
        if let Some(l) = self.ir_drop_mv {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::validation(format!(
                    "net {id}: IR-drop label must be finite and >= 0, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Which columns feed the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSetId {
    /// Resistance, power, peak/average current and coordinates.
    #[serde(rename = "setA", alias = "SetA", alias = "seta")]
    SetA,
    /// Set A plus rise time, fall time and RC response time.
    #[serde(rename = "setB", alias = "SetB", alias = "setb")]
    SetB,
}

impl FeatureSetId {
    pub fn columns(self) -> &'static [&'static str] {
        const B: [&str; 9] = [
            "resistance_ohm",
            "p_total_w",
            "i_peak_a",
            "i_avg_a",
            "x_um",
            "y_um",
            "t_rise_s",
            "t_fall_s",
            "tau_s",
        ];
        match self {
            FeatureSetId::SetA => &B[..6],
            FeatureSetId::SetB => &B,
        }
    }

    pub fn width(self) -> usize {
        self.columns().len()
    }
}

impl fmt::Display for FeatureSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSetId::SetA => "setA",
            FeatureSetId::SetB => "setB",
        })
    }
}

impl FromStr for FeatureSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seta" | "a" => Ok(FeatureSetId::SetA),
            "setb" | "b" => Ok(FeatureSetId::SetB),
            _ => Err(Error::Config(format!(
                "unknown feature set `{s}` (expected setA or setB)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<NetRecord>,
    vdd_mv: f64,
    pub provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<NetRecord>, vdd_mv: f64, provenance: impl Into<String>) -> Result<Self> {
        if !(vdd_mv > 0.0 && vdd_mv.is_finite()) {
            return Err(Error::validation(format!("vdd_mv must be positive, got {vdd_mv}")));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.net_id) {
                return Err(Error::validation(format!("duplicate net_id {}", r.net_id)));
            }
        }
        Ok(Dataset {
            records,
            vdd_mv,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[NetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vdd_mv(&self) -> f64 {
        self.vdd_mv
    }

    pub fn net_ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.net_id).collect()
    }

    pub fn has_all_labels(&self) -> bool {
        self.records.iter().all(|r| r.ir_drop_mv.is_some())
    }

    /// Labels in mV; errors if any record is unlabelled.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                r.ir_drop_mv.ok_or_else(|| {
                    Error::validation(format!("net {} has no ir_drop_mv label", r.net_id))
                })
            })
            .collect()
    }

    /// A new dataset holding the records at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            vdd_mv: self.vdd_mv,
            provenance: self.provenance.clone(),
        }
    }
}

/// Read a dataset from the CSV layout documented at module level.
pub fn load_dataset(path: impl AsRef<Path>, vdd_mv: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut ds = read_dataset(file, vdd_mv)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

pub fn read_dataset(reader: impl Read, vdd_mv: f64) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let has_label = match names.len() {
        10 => false,
        11 if names[10] == LABEL_COLUMN => true,
        _ => {
            return Err(Error::Parse {
                row: 1,
                message: format!(
                    "header must be `{}[,{LABEL_COLUMN}]`, got `{}`",
                    CSV_COLUMNS.join(","),
                    names.join(",")
                ),
            })
        }
    };
    if names[..10] != CSV_COLUMNS {
        return Err(Error::Parse {
            row: 1,
            message: format!("unexpected header `{}`", names.join(",")),
        });
    }

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Header is line 1, first data row is line 2.
        let line = i + 2;
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {} fields, got {}", names.len(), rec.len()),
            });
        }
        let num = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().map_err(|e| Error::Parse {
                row: line,
                message: format!("column `{}`: {e} (`{}`)", names[c], &rec[c]),
            })
        };
        let net_id = rec[0].parse::<u64>().map_err(|e| Error::Parse {
            row: line,
            message: format!("column `net_id`: {e} (`{}`)", &rec[0]),
        })?;
        let ir_drop_mv = if has_label && !rec[10].is_empty() {
            Some(num(10)?)
        } else {
            None
        };
        records.push(NetRecord {
            net_id,
            x_um: num(1)?,
            y_um: num(2)?,
            resistance_ohm: num(3)?,
            p_total_w: num(4)?,
            i_peak_a: num(5)?,
            i_avg_a: num(6)?,
            t_rise_s: num(7)?,
            t_fall_s: num(8)?,
            tau_s: num(9)?,
            ir_drop_mv,
        });
    }
    Dataset::new(records, vdd_mv, String::new())
}

/// Shortest round-trip decimal; switches to exponent form for very small or
/// very large magnitudes so timing fields stay readable.
pub(crate) fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    write_dataset(ds, &mut f)?;
    f.flush()?;
    Ok(())
}

/// The label column is written iff at least one record carries a label.
pub fn write_dataset(ds: &Dataset, writer: impl Write) -> Result<()> {
    let with_label = ds.records.iter().any(|r| r.ir_drop_mv.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if with_label {
        header.push(LABEL_COLUMN);
    }
    w.write_record(&header)?;
    for r in &ds.records {
        let mut row = vec![
            r.net_id.to_string(),
            fmt_f64(r.x_um),
            fmt_f64(r.y_um),
            fmt_f64(r.resistance_ohm),
            fmt_f64(r.p_total_w),
            fmt_f64(r.i_peak_a),
            fmt_f64(r.i_avg_a),
            fmt_f64(r.t_rise_s),
            fmt_f64(r.t_fall_s),
            fmt_f64(r.tau_s),
        ];
        if with_label {
            row.push(r.ir_drop_mv.map(fmt_f64).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Model inputs for one feature set, with ids and labels kept row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub set_id: FeatureSetId,
    pub values: Matrix,
    pub net_ids: Vec<u64>,
    pub labels: Vec<Option<f64>>,
}

impl FeatureMatrix {
    pub fn columns(&self) -> &'static [&'static str] {
        self.set_id.columns()
    }
}

/// Column order: `[R, P, I_peak, I_avg, x, y]`, then `[t_rise, t_fall, tau]`
/// for [`FeatureSetId::SetB`]. The net id is carried alongside, never as an
/// input column.
pub fn select_features(ds: &Dataset, set_id: FeatureSetId) -> Result<FeatureMatrix> {
    if ds.is_empty() {
        return Err(Error::validation("cannot select features from an empty dataset"));
    }
    let width = set_id.width();
    let mut data = Vec::with_capacity(ds.len() * width);
    for r in &ds.records {
        let full = [
            r.resistance_ohm,
            r.p_total_w,
            r.i_peak_a,
            r.i_avg_a,
            r.x_um,
            r.y_um,
            r.t_rise_s,
            r.t_fall_s,
            r.tau_s,
        ];
        data.extend_from_slice(&full[..width]);
    }
    Ok(FeatureMatrix {
        set_id,
        values: Matrix::from_vec(ds.len(), width, data)?,
        net_ids: ds.net_ids(),
        labels: ds.records.iter().map(|r| r.ir_drop_mv).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(format!(
                "split fractions must be non-negative, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Index lists produced by [`split_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then floor(train·N) / floor(val·N) / remainder.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::validation(format!(
            "need at least 10 records to split, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    let floor = |frac: f64| ((frac * n as f64) + 1e-9).floor() as usize;
    let n_train = floor(spec.train_frac).min(n);
    let n_val = floor(spec.val_frac).min(n - n_train);
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok(Split {
        train: perm,
        val,
        test,
    })
}

pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    split_indices(ds.len(), spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "net_id,x_um,y_um,resistance_ohm,p_total_w,i_peak_a,i_avg_a,t_rise_s,t_fall_s,tau_s";

    fn csv_with(rows: &[&str], label: bool) -> String {
        let mut s = String::from(HEADER);
        if label {
            s.push_str(",ir_drop_mv");
        }
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn three_valid_rows() {
        let csv = csv_with(
            &[
                "0,1,2,2,0.1,0.03,0.01,1e-11,2e-11,5e-12,3.5",
                "1,1.5,2,2,0.1,0.03,0.01,1e-11,2e-11,5e-12,4",
                "2,3,2,2,0.1,0.03,0.01,1e-11,2e-11,5e-12,0",
            ],
            true,
        );
        let ds = read_dataset(csv.as_bytes(), 800.0).unwrap();
        assert_eq!(ds.net_ids(), vec![0, 1, 2]);
        assert_eq!(ds.records()[0].ir_drop_mv, Some(3.5));
        assert_eq!(ds.records()[0].t_rise_s, 1e-11);
    }

    #[test]
    fn missing_label_column() {
        let csv = csv_with(&["0,1,2,2,0.1,0.03,0.01,0,0,0", "1,1,2,2,0.1,0.03,0.01,0,0,0"], false);
        let ds = read_dataset(csv.as_bytes(), 800.0).unwrap();
        assert!(ds.records().iter().all(|r| r.ir_drop_mv.is_none()));
        assert!(ds.labels().is_err());
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let csv = csv_with(
            &["7,1,2,2,0.1,0.03,0.01,0,0,0", "7,1,2,2,0.1,0.03,0.01,0,0,0"],
            false,
        );
        let err = read_dataset(csv.as_bytes(), 800.0).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains('7')), "{err}");
    }

    #[test]
    fn malformed_row_names_row() {
        let csv = csv_with(&["0,1,2,2,0.1,0.03,0.01,0,0,0", "1,1,oops,2,0.1,0.03,0.01,0,0,0"], false);
        match read_dataset(csv.as_bytes(), 800.0).unwrap_err() {
            Error::Parse { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("y_um"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_positive_resistance_is_rejected() {
        let csv = csv_with(&["0,1,2,0,0.1,0.03,0.01,0,0,0"], false);
        assert!(matches!(
            read_dataset(csv.as_bytes(), 800.0),
            Err(Error::Validation(_))
        ));
    }

    fn record(id: u64) -> NetRecord {
        NetRecord {
            net_id: id,
            x_um: 1.0,
            y_um: 2.0,
            resistance_ohm: 2.0,
            p_total_w: 0.1,
            i_peak_a: 0.03,
            i_avg_a: 0.01,
            t_rise_s: 1e-11,
            t_fall_s: 2e-11,
            tau_s: 3e-12,
            ir_drop_mv: None,
        }
    }

    #[test]
    fn feature_layout() {
        let ds = Dataset::new(vec![record(0)], 800.0, "").unwrap();
        let a = select_features(&ds, FeatureSetId::SetA).unwrap();
        assert_eq!(a.values.row(0), &[2.0, 0.1, 0.03, 0.01, 1.0, 2.0]);
        let b = select_features(&ds, FeatureSetId::SetB).unwrap();
        assert_eq!(b.values.cols(), 9);
        assert_eq!(&b.values.row(0)[6..], &[1e-11, 2e-11, 3e-12]);

        let five = Dataset::new((0..5).map(record).collect(), 800.0, "").unwrap();
        assert_eq!(select_features(&five, FeatureSetId::SetA).unwrap().values.rows(), 5);
        assert_eq!(select_features(&five, FeatureSetId::SetB).unwrap().values.cols(), 9);
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(514, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (359, 51, 104));

        let a = split_indices(10, &SplitSpec { seed: 1, ..SplitSpec::default() }).unwrap();
        let b = split_indices(10, &SplitSpec { seed: 2, ..SplitSpec::default() }).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (7, 1, 2));
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (7, 1, 2));
        assert_ne!(a, b);

        let all = split_indices(
            10,
            &SplitSpec { train_frac: 1.0, val_frac: 0.0, test_frac: 0.0, seed: 3 },
        )
        .unwrap();
        let mut t = all.train.clone();
        t.sort_unstable();
        assert_eq!(t, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn bad_fractions() {
        let spec = SplitSpec { train_frac: 0.5, val_frac: 0.1, test_frac: 0.1, seed: 0 };
        assert!(split_indices(20, &spec).is_err());
        let spec = SplitSpec { train_frac: 1.2, val_frac: -0.2, test_frac: 0.0, seed: 0 };
        assert!(split_indices(20, &spec).is_err());
    }
}
