//! Data containers, intervention queries, seeded randomness and dataset I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confounders::FunctionalConfounder;
use crate::error::{check_dim, EfcError, Result};
use crate::scalar::Scalar;

/// Observed pre-outcome vectors with (optional) outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<F> {
    points: Array2<F>,
    outcomes: Option<Array1<F>>,
    confounder_cache: Option<Array2<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(points: Array2<F>, outcomes: Option<Array1<F>>) -> Result<Self> {
        if let Some(y) = &outcomes {
            check_dim(points.nrows(), y.len())?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(EfcError::NonFinite("outcome".into()));
            }
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(EfcError::NonFinite("dataset point".into()));
        }
        if points.ncols() == 0 {
            return Err(EfcError::InvalidParameter("dataset dimension must be positive".into()));
        }
        Ok(Self { points, outcomes, confounder_cache: None })
    }

    /// Builds a dataset with an empty point matrix of width `dim`.
    pub fn empty(dim: usize, with_outcomes: bool) -> Self {
        Self {
            points: Array2::zeros((0, dim)),
            outcomes: with_outcomes.then(|| Array1::zeros(0)),
            confounder_cache: None,
        }
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn points(&self) -> &Array2<F> {
        &self.points
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, F> {
        self.points.row(i)
    }

    pub fn outcomes(&self) -> Option<&Array1<F>> {
        self.outcomes.as_ref()
    }

    /// Outcomes, or an error naming the missing column.
    pub fn require_outcomes(&self) -> Result<&Array1<F>> {
        self.outcomes
            .as_ref()
            .ok_or_else(|| EfcError::InvalidParameter("dataset has no outcome column".into()))
    }

    pub fn confounder_cache(&self) -> Option<&Array2<F>> {
        self.confounder_cache.as_ref()
    }

    /// Evaluates `conf` on every row and stores the values alongside the points.
    pub fn with_confounder_cache(mut self, conf: &FunctionalConfounder<F>) -> Result<Self> {
        self.confounder_cache = Some(conf.values(&self.points)?);
        Ok(self)
    }

    /// Confounder values per row, from the cache when present.
    pub fn confounder_values(&self, conf: &FunctionalConfounder<F>) -> Result<Array2<F>> {
        match &self.confounder_cache {
            Some(c) if c.ncols() == conf.output_dim() => Ok(c.clone()),
            _ => conf.values(&self.points),
        }
    }

    /// Sub-dataset made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            points: self.points.select(Axis(0), rows),
            outcomes: self.outcomes.as_ref().map(|y| y.select(Axis(0), rows)),
            confounder_cache: self.confounder_cache.as_ref().map(|c| c.select(Axis(0), rows)),
        }
    }
}

/// The pair `(t*, h2)` naming the conditional effect `phi(t*, h2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionQuery<F> {
    pub t_star: Array1<F>,
    pub h_target: Array1<F>,
}

impl<F: Scalar> InterventionQuery<F> {
    pub fn new(t_star: Array1<F>, h_target: Array1<F>) -> Result<Self> {
        if t_star.iter().chain(h_target.iter()).any(|v| !v.is_finite()) {
            return Err(EfcError::NonFinite("intervention query".into()));
        }
        Ok(Self { t_star, h_target })
    }

    /// Scalar-confounder convenience constructor.
    pub fn scalar(t_star: Array1<F>, h_target: F) -> Result<Self> {
        Self::new(t_star, Array1::from_elem(1, h_target))
    }
}

/// Seed plus stream id; every random draw in the crate is a pure function of one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Independent child stream keyed by `id` (e.g. a row or person index).
    pub fn substream(&self, id: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(id.wrapping_add(1))),
        }
    }

    /// Child seed keyed by a task tag; used to split a run into unrelated experiments.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(tag ^ 0xD1B5_4A32_D192_ED03)),
            stream_id: self.stream_id,
        }
    }
}

/// Uniform random permutation with no fixed points (identity when `n == 1`).
pub fn random_derangement(n: usize, rng: RngSeed) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    let mut r = rng.rng();
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// One query per row: `t* = points[i]`, `h2 = h(points[pi(i)])` for a random derangement `pi`.
pub fn make_eval_queries<F: Scalar>(
    dataset: &Dataset<F>,
    conf: &FunctionalConfounder<F>,
    rng: RngSeed,
) -> Result<Vec<InterventionQuery<F>>> {
    if dataset.is_empty() {
        return Err(EfcError::EmptyDataset);
    }
    let h = dataset.confounder_values(conf)?;
    let perm = random_derangement(dataset.n(), rng);
    Ok(perm
        .iter()
        .enumerate()
        .map(|(i, &j)| InterventionQuery {
            t_star: dataset.point(i).to_owned(),
            h_target: h.row(j).to_owned(),
        })
        .collect())
}

fn malformed(path: &Path, reason: impl Into<String>) -> EfcError {
    EfcError::MalformedFile { path: path.to_path_buf(), reason: reason.into() }
}

/// Formats a scalar with 17 significant digits (lossless for `f64`).
pub fn format_scalar<F: Scalar>(x: F) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn parse_scalar<F: Scalar>(cell: &str, path: &Path, line: usize) -> Result<F> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| malformed(path, format!("line {line}: non-numeric cell {cell:?}")))?;
    F::from_f64(v)
        .filter(|x| x.is_finite())
        .ok_or_else(|| malformed(path, format!("line {line}: non-finite cell {cell:?}")))
}

/// Reads a numeric CSV with a header row; returns header and row-major values.
pub fn read_numeric_csv<F: Scalar>(path: &Path) -> Result<(Vec<String>, Array2<F>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(EfcError::EmptyFile(path.to_path_buf()));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != width {
            return Err(malformed(
                path,
                format!("line {line}: expected {width} cells, found {}", rec.len()),
            ));
        }
        for cell in rec.iter() {
            values.push(parse_scalar::<F>(cell, path, line)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(EfcError::EmptyFile(path.to_path_buf()));
    }
    let m = Array2::from_shape_vec((rows, width), values).expect("shape matches row count");
    Ok((header, m))
}

/// Loads a dataset CSV with header `t_0,...,t_{T-1}[,y]`.
pub fn load_dataset<F: Scalar>(path: impl AsRef<Path>, has_outcome: bool) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let (header, m) = read_numeric_csv::<F>(path)?;
    let dim = if has_outcome {
        if header.last().map(String::as_str) != Some("y") {
            return Err(malformed(path, "last column must be named `y`"));
        }
        header.len() - 1
    } else {
        header.len()
    };
    if dim == 0 {
        return Err(malformed(path, "no t_ columns"));
    }
    for (i, h) in header[..dim].iter().enumerate() {
        if *h != format!("t_{i}") {
            return Err(malformed(path, format!("column {i} must be named t_{i}, found {h:?}")));
        }
    }
    let points = m.slice(ndarray::s![.., ..dim]).to_owned();
    let outcomes = has_outcome.then(|| m.column(dim).to_owned());
    Dataset::new(points, outcomes)
}

/// Loads intervention queries from a CSV with header `t_0,...,t_{T-1},h_0,...,h_{d-1}`.
pub fn load_queries<F: Scalar>(path: impl AsRef<Path>) -> Result<Vec<InterventionQuery<F>>> {
    let path = path.as_ref();
    let (header, m) = read_numeric_csv::<F>(path)?;
    let dim = header.iter().take_while(|h| h.starts_with("t_")).count();
    let out = header.len() - dim;
    if dim == 0 || out == 0 {
        return Err(malformed(path, "need t_ columns followed by h_ columns"));
    }
    for (i, h) in header.iter().enumerate() {
        let want = if i < dim { format!("t_{i}") } else { format!("h_{}", i - dim) };
        if *h != want {
            return Err(malformed(path, format!("column {i} must be named {want}, found {h:?}")));
        }
    }
    m.outer_iter()
        .map(|row| InterventionQuery::new(row.slice(ndarray::s![..dim]).to_owned(), row.slice(ndarray::s![dim..]).to_owned()))
        .collect()
}

/// Writes queries in the layout read by [`load_queries`].
pub fn save_queries<F: Scalar>(path: impl AsRef<Path>, queries: &[InterventionQuery<F>]) -> Result<()> {
    let first = queries.first().ok_or(EfcError::EmptyDataset)?;
    let (dim, out) = (first.t_star.len(), first.h_target.len());
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let header: Vec<String> =
        (0..dim).map(|i| format!("t_{i}")).chain((0..out).map(|j| format!("h_{j}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for q in queries {
        check_dim(dim, q.t_star.len())?;
        check_dim(out, q.h_target.len())?;
        let cells: Vec<String> = q.t_star.iter().chain(q.h_target.iter()).map(|&x| format_scalar(x)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a dataset CSV; inverse of [`load_dataset`] bit-for-bit on finite doubles.
pub fn save_dataset<F: Scalar>(path: impl AsRef<Path>, data: &Dataset<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("t_{i}")).collect();
    if data.outcomes.is_some() {
        header.push("y".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..data.n() {
        let mut cells: Vec<String> = data.point(i).iter().map(|&x| format_scalar(x)).collect();
        if let Some(y) = &data.outcomes {
            cells.push(format_scalar(y[i]));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar metadata written next to generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub dim: usize,
    pub model: serde_json::Value,
    pub seed: u64,
}

/// Path of the JSON sidecar for a dataset file (`data.csv` -> `data.json`).
pub fn metadata_path(dataset_path: &Path) -> std::path::PathBuf {
    dataset_path.with_extension("json")
}

pub fn write_metadata(dataset_path: &Path, meta: &DatasetMetadata) -> Result<()> {
    let f = File::create(metadata_path(dataset_path))?;
    serde_json::to_writer_pretty(f, meta)?;
    Ok(())
}

pub fn read_metadata(dataset_path: &Path) -> Result<DatasetMetadata> {
    let f = File::open(metadata_path(dataset_path))?;
    Ok(serde_json::from_reader(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confounders::FunctionalConfounder;
    use ndarray::array;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_three_rows_with_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "t_0,t_1,y\n1,2,3\n4,5,6\n7,8,9\n");
        let d: Dataset<f64> = load_dataset(&p, true).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.outcomes().unwrap()[2], 9.0);
    }

    #[test]
    fn ragged_row_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "t_0,t_1,y\n1,2,3\n4,5\n");
        assert!(matches!(load_dataset::<f64>(&p, true), Err(EfcError::MalformedFile { .. })));
    }

    #[test]
    fn non_numeric_cell_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "t_0,t_1\n1,abc\n");
        assert!(matches!(load_dataset::<f64>(&p, false), Err(EfcError::MalformedFile { .. })));
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "t_0,t_1\n");
        assert!(matches!(load_dataset::<f64>(&p, false), Err(EfcError::EmptyFile(_))));
        let p = write_file(&dir, "e.csv", "");
        assert!(load_dataset::<f64>(&p, false).is_err());
    }

    #[test]
    fn dataset_rejects_nan_and_length_mismatch() {
        assert!(Dataset::new(array![[f64::NAN]], None).is_err());
        assert!(Dataset::new(array![[1.0], [2.0]], Some(array![1.0])).is_err());
    }

    #[test]
    fn single_row_query_uses_own_confounder() {
        let d = Dataset::new(array![[1.0f64, 0.0]], None).unwrap();
        let conf = FunctionalConfounder::linear_sum(1.0, 2).unwrap();
        let q = make_eval_queries(&d, &conf, RngSeed::new(3)).unwrap();
        assert_eq!(q.len(), 1);
        assert!((q[0].h_target[0] - conf.value(d.point(0)).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_has_no_queries() {
        let d = Dataset::<f64>::empty(2, false);
        let conf = FunctionalConfounder::linear_sum(1.0, 2).unwrap();
        assert!(matches!(
            make_eval_queries(&d, &conf, RngSeed::new(0)),
            Err(EfcError::EmptyDataset)
        ));
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in 2..30 {
            let p = random_derangement(n, RngSeed::new(n as u64));
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn substreams_differ_and_repeat() {
        use rand::Rng;
        let s = RngSeed::new(7);
        let a: u64 = s.substream(1).rng().random();
        let b: u64 = s.substream(2).rng().random();
        let a2: u64 = s.substream(1).rng().random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn metadata_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sim.csv");
        let meta = DatasetMetadata { dim: 4, model: serde_json::json!({"family": "A"}), seed: 9 };
        write_metadata(&p, &meta).unwrap();
        assert_eq!(read_metadata(&p).unwrap(), meta);
        assert!(dir.path().join("sim.json").exists());
    }

    #[test]
    fn queries_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        let qs = vec![
            InterventionQuery::new(array![0.1, -2.5e-7], array![1.0 / 3.0]).unwrap(),
            InterventionQuery::new(array![3.0, 4.0], array![-0.7]).unwrap(),
        ];
        save_queries(&p, &qs).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next().unwrap(), "t_0,t_1,h_0");
        assert_eq!(load_queries::<f64>(&p).unwrap(), qs);
    }

    #[test]
    fn queries_need_named_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "t_0,t_1\n1,2\n");
        assert!(matches!(load_queries::<f64>(&p), Err(EfcError::MalformedFile { .. })));
        let p = write_file(&dir, "b.csv", "t_0,h_1\n1,2\n");
        assert!(matches!(load_queries::<f64>(&p), Err(EfcError::MalformedFile { .. })));
        assert!(save_queries::<f64>(dir.path().join("c.csv"), &[]).is_err());
    }
}
