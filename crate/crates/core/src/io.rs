//! CSV matrices and the JSON model file. Every float is written with 17
//! significant digits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

use crate::error::{PplsError, Result};
use crate::inference::StandardErrors;
use crate::model::PplsParams;
use crate::pipeline::{Gaussianizer, Transform};
use crate::predict::{intervals, Intervals, PredictiveLaw};
use crate::stiefel::StiefelPoint;

pub const MODEL_FORMAT_VERSION: u64 = 1;

/// `{:.16e}`, or `null` for non-finite values in JSON.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn json_f64(v: f64) -> String {
    if v.is_finite() {
        fmt_f64(v)
    } else {
        "null".into()
    }
}

/// Parses CSV text into a matrix. A first row that does not parse as numbers
/// is treated as a header. Ragged rows and non-numeric cells are reported
/// with their 1-based line number.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PplsError::Parse(format!("CSV error: {e}")))?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, usize> = rec
            .iter()
            .enumerate()
            .map(|(j, f)| f.parse::<f64>().map_err(|_| j))
            .collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(j) => {
                return Err(PplsError::Parse(format!(
                    "row {line}, column {}: cannot parse {:?} as a number",
                    j + 1,
                    &rec[j]
                )))
            }
        };
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(PplsError::Parse(format!(
                    "row {line}: expected {w} fields, found {}",
                    values.len()
                )))
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let cols = width.ok_or_else(|| PplsError::Input("CSV has no data rows".into()))?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PplsError::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|e| match e {
        PplsError::Parse(m) => PplsError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// CSV with header `<prefix>1, …, <prefix>d`.
pub fn matrix_csv(m: &DMatrix<f64>, prefix: &str) -> String {
    let mut s = String::new();
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    std::fs::write(path, matrix_csv(m, prefix))?;
    Ok(())
}

/// Everything needed to predict from raw rows.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub params: PplsParams,
    pub n: usize,
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub gamma: f64,
    pub kappa: f64,
    pub transform_x: Gaussianizer,
    pub transform_y: Gaussianizer,
    pub objective: Option<f64>,
    pub standard_errors: Option<StandardErrors>,
}

impl ModelFile {
    /// Parameters with zero means, `γ = κ = 1` and no transform.
    pub fn bare(params: PplsParams, n: usize) -> Self {
        let (p, q) = (params.p(), params.q());
        let id = Gaussianizer {
            kind: Transform::Identity,
            sorted: Vec::new(),
        };
        ModelFile {
            params,
            n,
            mean_x: DVector::zeros(p),
            mean_y: DVector::zeros(q),
            gamma: 1.0,
            kappa: 1.0,
            transform_x: id.clone(),
            transform_y: id,
            objective: None,
            standard_errors: None,
        }
    }

    pub fn to_json(&self) -> String {
        let p = &self.params;
        let vec = |v: &[f64]| format!("[{}]", v.iter().map(|x| json_f64(*x)).collect::<Vec<_>>().join(", "));
        let mat = |m: &DMatrix<f64>| {
            let rows: Vec<String> = (0..m.nrows())
                .map(|i| vec(&m.row(i).iter().copied().collect::<Vec<_>>()))
                .collect();
            format!("[\n    {}\n  ]", rows.join(",\n    "))
        };
        let opt = |v: Option<f64>| v.map_or("null".to_string(), json_f64);
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"format\": \"ppls-model\",");
        let _ = writeln!(s, "  \"version\": {MODEL_FORMAT_VERSION},");
        let _ = writeln!(s, "  \"p\": {}, \"q\": {}, \"r\": {}, \"n\": {},", p.p(), p.q(), p.r(), self.n);
        let _ = writeln!(s, "  \"sigma_e2\": {},", json_f64(p.sigma_e2));
        let _ = writeln!(s, "  \"sigma_f2\": {},", json_f64(p.sigma_f2));
        let _ = writeln!(s, "  \"sigma_h2\": {},", json_f64(p.sigma_h2));
        let _ = writeln!(s, "  \"pcca\": {},", p.pcca);
        let _ = writeln!(s, "  \"theta_t2\": {},", vec(p.theta_t2.as_slice()));
        let _ = writeln!(s, "  \"b\": {},", vec(p.b.as_slice()));
        let _ = writeln!(s, "  \"gamma\": {},", json_f64(self.gamma));
        let _ = writeln!(s, "  \"kappa\": {},", json_f64(self.kappa));
        let _ = writeln!(s, "  \"objective\": {},", opt(self.objective));
        let _ = writeln!(s, "  \"mean_x\": {},", vec(self.mean_x.as_slice()));
        let _ = writeln!(s, "  \"mean_y\": {},", vec(self.mean_y.as_slice()));
        let _ = writeln!(s, "  \"transform\": \"{}\",", self.transform_x.kind);
        let sorted = |g: &Gaussianizer| {
            if g.sorted.is_empty() {
                "[]".to_string()
            } else {
                let cols: Vec<String> = g.sorted.iter().map(|c| vec(c)).collect();
                format!("[\n    {}\n  ]", cols.join(",\n    "))
            }
        };
        let _ = writeln!(s, "  \"transform_x_sorted\": {},", sorted(&self.transform_x));
        let _ = writeln!(s, "  \"transform_y_sorted\": {},", sorted(&self.transform_y));
        if let Some(se) = &self.standard_errors {
            let th: Vec<String> = se.components.iter().map(|c| opt(c.theta_t2)).collect();
            let b: Vec<String> = se.components.iter().map(|c| opt(c.b)).collect();
            let _ = writeln!(
                s,
                "  \"standard_errors\": {{\"theta_t2\": [{}], \"b\": [{}], \"sigma_h2\": {}}},",
                th.join(", "),
                b.join(", "),
                opt(se.sigma_h2)
            );
        }
        let _ = writeln!(s, "  \"w\": {},", mat(p.w.matrix()));
        let _ = writeln!(s, "  \"c\": {}", mat(p.c.matrix()));
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| PplsError::Parse(format!("model file: {e}")))?;
        if v.get("format").and_then(Value::as_str) != Some("ppls-model") {
            return Err(PplsError::Parse("not a ppls model file".into()));
        }
        let num = |k: &str| -> Result<f64> {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| PplsError::Parse(format!("model file: missing number {k:?}")))
        };
        let int = |k: &str| -> Result<usize> {
            v.get(k)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| PplsError::Parse(format!("model file: missing integer {k:?}")))
        };
        let (p, q, r) = (int("p")?, int("q")?, int("r")?);
        let list = |k: &str, len: usize| -> Result<DVector<f64>> {
            let a = v
                .get(k)
                .and_then(Value::as_array)
                .ok_or_else(|| PplsError::Parse(format!("model file: missing array {k:?}")))?;
            let vals: Option<Vec<f64>> = a.iter().map(Value::as_f64).collect();
            let vals = vals.ok_or_else(|| PplsError::Parse(format!("model file: {k:?} has non-numbers")))?;
            if vals.len() != len {
                return Err(PplsError::Parse(format!("model file: {k:?} needs {len} entries")));
            }
            Ok(DVector::from_vec(vals))
        };
        let mat = |k: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let a = v
                .get(k)
                .and_then(Value::as_array)
                .ok_or_else(|| PplsError::Parse(format!("model file: missing matrix {k:?}")))?;
            if a.len() != rows {
                return Err(PplsError::Parse(format!("model file: {k:?} needs {rows} rows")));
            }
            let mut m = DMatrix::zeros(rows, cols);
            for (i, row) in a.iter().enumerate() {
                let row = row
                    .as_array()
                    .filter(|r| r.len() == cols)
                    .ok_or_else(|| PplsError::Parse(format!("model file: {k:?} row {} needs {cols} entries", i + 1)))?;
                for (j, x) in row.iter().enumerate() {
                    m[(i, j)] = x
                        .as_f64()
                        .ok_or_else(|| PplsError::Parse(format!("model file: {k:?} has non-numbers")))?;
                }
            }
            Ok(m)
        };
        let params = PplsParams {
            w: StiefelPoint::new(mat("w", p, r)?)?,
            c: StiefelPoint::new(mat("c", q, r)?)?,
            b: list("b", r)?,
            theta_t2: list("theta_t2", r)?,
            sigma_e2: num("sigma_e2")?,
            sigma_f2: num("sigma_f2")?,
            sigma_h2: num("sigma_h2")?,
            pcca: v.get("pcca").and_then(Value::as_bool).unwrap_or(false),
        };
        params.validate()?;
        let kind: Transform = v
            .get("transform")
            .and_then(Value::as_str)
            .unwrap_or("none")
            .parse()?;
        let sorted = |k: &str, d: usize| -> Result<Vec<Vec<f64>>> {
            if kind != Transform::RankInt {
                return Ok(Vec::new());
            }
            let a = v
                .get(k)
                .and_then(Value::as_array)
                .filter(|a| a.len() == d)
                .ok_or_else(|| PplsError::Parse(format!("model file: {k:?} needs {d} columns")))?;
            a.iter()
                .map(|c| {
                    c.as_array()
                        .and_then(|c| c.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                        .filter(|c| !c.is_empty())
                        .ok_or_else(|| PplsError::Parse(format!("model file: bad column in {k:?}")))
                })
                .collect()
        };
        Ok(ModelFile {
            n: int("n")?,
            mean_x: list("mean_x", p)?,
            mean_y: list("mean_y", q)?,
            gamma: num("gamma")?,
            kappa: num("kappa")?,
            transform_x: Gaussianizer {
                kind,
                sorted: sorted("transform_x_sorted", p)?,
            },
            transform_y: Gaussianizer {
                kind,
                sorted: sorted("transform_y_sorted", q)?,
            },
            objective: v.get("objective").and_then(Value::as_f64),
            standard_errors: None,
            params,
        })
    }

    /// Predictive law in the transformed scale, with the stored `γ` and `κ`.
    pub fn law(&self) -> Result<PredictiveLaw> {
        let mut law = PredictiveLaw::new(self.params.clone(), self.gamma, self.mean_x.clone(), self.mean_y.clone())?;
        law.set_kappa(self.kappa);
        Ok(law)
    }

    /// Intervals for raw `x` rows, mapped back through the `y` transform.
    pub fn predict(&self, x: &DMatrix<f64>, alpha: f64) -> Result<Intervals> {
        if x.ncols() != self.params.p() {
            return Err(PplsError::Dimension(format!(
                "model expects {} x columns, got {}",
                self.params.p(),
                x.ncols()
            )));
        }
        let law = self.law()?;
        let mut iv = intervals(&law, &self.transform_x.transform(x)?, alpha)?;
        iv.mean = self.transform_y.inverse(&iv.mean)?;
        iv.lo = self.transform_y.inverse(&iv.lo)?;
        iv.hi = self.transform_y.inverse(&iv.hi)?;
        Ok(iv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PplsError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
