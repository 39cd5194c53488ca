//! Labeled datasets: synthetic generator, CSV ingestion, standardization and
//! stratified splitting.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WdaError};

/// Isotropic standard deviation of the synthetic modes.
pub const SYNTHETIC_MODE_STD: f64 = 0.3;

/// Mode centers (first two coordinates) of the three synthetic classes.
pub const SYNTHETIC_CENTERS: [[[f64; 2]; 2]; 3] = [
    [[0.0, 0.0], [3.0, 3.0]],
    [[0.0, 3.0], [3.0, 0.0]],
    [[1.5, -1.5], [1.5, 4.5]],
];

/// Relative threshold below which a feature's spread counts as zero.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

/// One class: its label and a `d × n_c` matrix with points as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassData {
    pub label: String,
    pub points: Array2<f64>,
}

/// Feature statistics recorded when a dataset is standardized. The vectors
/// serialize as plain arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    #[serde(with = "plain_vec")]
    pub means: Array1<f64>,
    #[serde(with = "plain_vec")]
    pub stds: Array1<f64>,
    /// Features with (numerically) zero variance; these are centered only.
    pub constant_features: Vec<usize>,
}

mod plain_vec {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(a.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Array1<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(Array1::from)
    }
}

impl Standardization {
    /// Pooled per-feature mean and population standard deviation.
    pub fn fit(data: &LabeledDataset) -> Result<Self> {
        let (pooled, _) = data.pooled();
        if pooled.ncols() == 0 {
            return Err(WdaError::Domain("cannot standardize an empty dataset".into()));
        }
        let means = pooled.mean_axis(Axis(1)).expect("nonempty");
        let stds = pooled.std_axis(Axis(1), 0.0);
        let constant_features = stds
            .iter()
            .zip(means.iter())
            .enumerate()
            .filter(|(_, (s, m))| **s <= ZERO_VARIANCE_TOL * (1.0 + m.abs()))
            .map(|(i, _)| i)
            .collect();
        Ok(Standardization {
            means,
            stds,
            constant_features,
        })
    }

    /// Applies the recorded statistics to every class of `data`.
    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        if data.dim() != self.means.len() {
            return Err(WdaError::dim("Standardization::apply", self.means.len(), data.dim()));
        }
        let mut scale = self.stds.mapv(|s| 1.0 / s);
        for &i in &self.constant_features {
            scale[i] = 1.0;
        }
        let mean_col = self.means.view().insert_axis(Axis(1));
        let scale_col = scale.view().insert_axis(Axis(1));
        let classes = data
            .classes
            .iter()
            .map(|c| ClassData {
                label: c.label.clone(),
                points: (&c.points - &mean_col) * scale_col,
            })
            .collect();
        Ok(LabeledDataset {
            classes,
            d: data.d,
            standardization: Some(self.clone()),
        })
    }
}

/// Per-class data matrices sharing a feature dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    classes: Vec<ClassData>,
    d: usize,
    standardization: Option<Standardization>,
}

impl LabeledDataset {
    /// Builds a dataset from `(label, d × n_c)` pairs. Labels must be
    /// distinct and every class nonempty.
    pub fn new(classes: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let Some(first) = classes.first() else {
            return Err(WdaError::Parameter("a dataset needs at least one class".into()));
        };
        let d = first.1.nrows();
        if d == 0 {
            return Err(WdaError::Parameter("feature dimension must be ≥ 1".into()));
        }
        let mut seen = HashMap::new();
        for (label, m) in &classes {
            if m.nrows() != d {
                return Err(WdaError::dim("LabeledDataset::new (class rows)", d, m.nrows()));
            }
            if m.ncols() == 0 {
                return Err(WdaError::Parameter(format!("class {label:?} has no points")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(WdaError::Domain(format!("class {label:?} contains non-finite values")));
            }
            if seen.insert(label.clone(), ()).is_some() {
                return Err(WdaError::Parameter(format!("duplicate class label {label:?}")));
            }
        }
        Ok(LabeledDataset {
            classes: classes
                .into_iter()
                .map(|(label, points)| ClassData { label, points })
                .collect(),
            d,
            standardization: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassData] {
        &self.classes
    }

    pub fn class(&self, c: usize) -> &ClassData {
        &self.classes[c]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.points.ncols()).collect()
    }

    pub fn total_points(&self) -> usize {
        self.class_sizes().iter().sum()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// All points side by side (`d × N`) with their class indices.
    pub fn pooled(&self) -> (Array2<f64>, Vec<usize>) {
        let views: Vec<ArrayView2<f64>> = self.classes.iter().map(|c| c.points.view()).collect();
        let pooled = ndarray::concatenate(Axis(1), &views).expect("classes share d");
        let labels = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, cls)| std::iter::repeat_n(c, cls.points.ncols()))
            .collect();
        (pooled, labels)
    }
}

/// Three interleaved bi-modal classes, discriminative only in the first two
/// coordinates; the remaining `d − 2` coordinates are standard normal noise.
///
/// Each class count must be even: half the points go to each mode.
pub fn make_synthetic(d: usize, counts: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    if d < 2 {
        return Err(WdaError::Parameter(format!("synthetic data needs d ≥ 2 (got {d})")));
    }
    if let Some(bad) = counts.iter().find(|n| **n == 0 || **n % 2 == 1) {
        return Err(WdaError::Parameter(format!(
            "synthetic class sizes must be even and positive (got {bad})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = Normal::new(0.0, SYNTHETIC_MODE_STD).expect("valid std");
    let mut classes = Vec::with_capacity(3);
    for (c, &n) in counts.iter().enumerate() {
        let mut x = Array2::<f64>::zeros((d, n));
        for i in 0..n {
            let center = SYNTHETIC_CENTERS[c][usize::from(i >= n / 2)];
            x[[0, i]] = center[0] + mode.sample(&mut rng);
            x[[1, i]] = center[1] + mode.sample(&mut rng);
            for k in 2..d {
                x[[k, i]] = StandardNormal.sample(&mut rng);
            }
        }
        classes.push(((c + 1).to_string(), x));
    }
    LabeledDataset::new(classes)
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelColumn {
    First,
    #[default]
    Last,
    /// Zero-based column index.
    Index(usize),
}

impl LabelColumn {
    fn resolve(self, width: usize) -> Result<usize> {
        let idx = match self {
            LabelColumn::First => 0,
            LabelColumn::Last => width.saturating_sub(1),
            LabelColumn::Index(i) => i,
        };
        if width < 2 || idx >= width {
            return Err(WdaError::Parse {
                row: 1,
                column: idx + 1,
                message: format!("label column {idx} out of range for {width} columns (need ≥ 1 feature)"),
            });
        }
        Ok(idx)
    }
}

/// Reads a comma-separated file of numeric features plus one label column.
pub fn load_csv(path: impl AsRef<Path>, label: LabelColumn) -> Result<LabeledDataset> {
    read_csv(std::fs::File::open(path)?, label)
}

/// [`load_csv`] on any reader. A first row whose feature cells do not all
/// parse as numbers is taken as a header. Classes appear in order of first
/// occurrence; row and column numbers in errors are 1-based.
pub fn read_csv<R: Read>(reader: R, label: LabelColumn) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut width = None;
    let mut label_idx = 0;
    let mut order: Vec<String> = Vec::new();
    let mut columns: HashMap<String, Vec<f64>> = HashMap::new();
    let mut d = 0;

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = match width {
            None => {
                let w = record.len();
                label_idx = label.resolve(w)?;
                d = w - 1;
                width = Some(w);
                let is_header = record
                    .iter()
                    .enumerate()
                    .any(|(j, cell)| j != label_idx && cell.parse::<f64>().is_err());
                if is_header {
                    continue;
                }
                w
            }
            Some(w) => w,
        };
        if record.len() != w {
            return Err(WdaError::Parse {
                row,
                column: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        let lab = record[label_idx].to_string();
        if lab.is_empty() {
            return Err(WdaError::Parse {
                row,
                column: label_idx + 1,
                message: "missing label".into(),
            });
        }
        let mut values = Vec::with_capacity(d);
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| WdaError::Parse {
                row,
                column: j + 1,
                message: format!("non-numeric feature value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(WdaError::Parse {
                    row,
                    column: j + 1,
                    message: format!("non-finite feature value {cell:?}"),
                });
            }
            values.push(v);
        }
        if !columns.contains_key(&lab) {
            order.push(lab.clone());
        }
        columns.entry(lab).or_default().extend(values);
    }

    if order.is_empty() {
        return Err(WdaError::Parse {
            row: 0,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let classes = order
        .into_iter()
        .map(|lab| {
            let flat = columns.remove(&lab).expect("label recorded");
            let n = flat.len() / d;
            // rows were appended point by point, so the buffer is n × d
            let points = Array2::from_shape_vec((n, d), flat)
                .expect("consistent width")
                .reversed_axes();
            (lab, points.as_standard_layout().to_owned())
        })
        .collect();
    LabeledDataset::new(classes)
}

/// Writes one row per point, features first, label last, with a header
/// `x1,…,xd,label`. Values use the shortest round-trip representation.
pub fn write_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(data, file)
}

pub fn write_csv_to<W: Write>(data: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for class in data.classes() {
        for col in class.points.axis_iter(Axis(1)) {
            let mut rec: Vec<String> = col.iter().map(|v| v.to_string()).collect();
            rec.push(class.label.clone());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a comma-separated numeric matrix with no header and no labels.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(WdaError::Parse {
                row,
                column: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| WdaError::Parse {
                row,
                column: j + 1,
                message: format!("non-numeric matrix entry {cell:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let Some(w) = width else {
        return Err(WdaError::Parse {
            row: 0,
            column: 0,
            message: "no matrix rows".into(),
        });
    };
    Ok(Array2::from_shape_vec((rows, w), values).expect("rows of equal width"))
}

/// Pooled standardization to zero mean and unit population variance.
pub fn standardize(data: &LabeledDataset) -> Result<LabeledDataset> {
    let stats = Standardization::fit(data)?;
    if !stats.constant_features.is_empty() {
        log::warn!(
            "features {:?} have zero variance; they are centered but not scaled",
            stats.constant_features
        );
    }
    stats.apply(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Split within each class (otherwise over the pooled points).
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.5,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(WdaError::Parameter(format!(
                "train fraction must lie in (0, 1) (got {})",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Training points per class: `round(fraction · n_c)`, kept in `[1, n_c − 1]`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded train/test split. Standardization statistics are fitted on the
/// training side and applied to both sides.
pub fn split(data: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    if let Some(c) = data.classes().iter().find(|c| c.points.ncols() < 2) {
        return Err(WdaError::Domain(format!(
            "class {:?} has {} point(s); at least 2 are needed to split",
            c.label,
            c.points.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes = data.class_sizes();
    // per class: which points go to the training side
    let mut in_train: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
    if spec.stratified {
        for (c, &n) in sizes.iter().enumerate() {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..train_count(n, spec.train_fraction)] {
                in_train[c][i] = true;
            }
        }
    } else {
        let mut idx: Vec<(usize, usize)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| (c, i)))
            .collect();
        idx.shuffle(&mut rng);
        let total = idx.len();
        for &(c, i) in &idx[..train_count(total, spec.train_fraction)] {
            in_train[c][i] = true;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, class) in data.classes().iter().enumerate() {
        let tr: Vec<usize> = (0..sizes[c]).filter(|&i| in_train[c][i]).collect();
        let te: Vec<usize> = (0..sizes[c]).filter(|&i| !in_train[c][i]).collect();
        if tr.is_empty() || te.is_empty() {
            return Err(WdaError::Domain(format!(
                "split leaves class {:?} empty on one side",
                class.label
            )));
        }
        train.push((class.label.clone(), class.points.select(Axis(1), &tr)));
        test.push((class.label.clone(), class.points.select(Axis(1), &te)));
    }
    let train = LabeledDataset::new(train)?;
    let test = LabeledDataset::new(test)?;
    let stats = Standardization::fit(&train)?;
    Ok((stats.apply(&train)?, stats.apply(&test)?))
}
