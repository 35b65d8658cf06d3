//! CSV series extracted from JSON reports for external plotting.

use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Series {
    /// `(eps, rescaled variance, se)` of a fluctuation report.
    Variance,
    /// `(radius, residual norm, se)` of a residual report.
    Residual,
    /// `(lambda, p, moment)` of a fluctuation or moment report.
    Moments,
}

impl Series {
    pub fn parse(s: &str) -> Option<Series> {
        match s {
            "variance" => Some(Series::Variance),
            "residual" => Some(Series::Residual),
            "moments" => Some(Series::Moments),
            _ => None,
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            Series::Variance => &["eps", "rescaled_variance", "se"],
            Series::Residual => &["radius", "residual_norm", "se"],
            Series::Moments => &["lambda", "p", "moment"],
        }
    }

    /// Default series of a report kind.
    pub fn for_kind(kind: Option<&str>) -> Series {
        match kind {
            Some("residual") => Series::Residual,
            _ => Series::Variance,
        }
    }
}

fn f(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Rows of `series` found in the report; missing sections give no rows.
pub fn rows(report: &Value, series: Series) -> Vec<Vec<String>> {
    let data = report.get("data").unwrap_or(report);
    let empty = Vec::new();
    match series {
        Series::Variance => data
            .get("rows")
            .and_then(Value::as_array)
            .unwrap_or(&empty)
            .iter()
            .filter_map(|r| {
                let est = r.get("rescaled")?;
                Some(vec![fmt(f(r.get("eps")?)?), fmt(f(est.get("value")?)?), fmt(f(est.get("se")?)?)])
            })
            .collect(),
        Series::Residual => {
            let mut out: Vec<(u64, Vec<String>)> = data
                .get("rows")
                .and_then(Value::as_array)
                .unwrap_or(&empty)
                .iter()
                .filter_map(|r| {
                    let radius = r.get("radius")?.as_u64()?;
                    let est = r.get("residual")?;
                    Some((radius, vec![radius.to_string(), fmt(f(est.get("value")?)?), fmt(f(est.get("se")?)?)]))
                })
                .collect();
            out.sort_by_key(|r| r.0);
            out.into_iter().map(|r| r.1).collect()
        }
        Series::Moments => {
            let table = data.get("moments").filter(|m| !m.is_null()).unwrap_or(data);
            table
                .get("rows")
                .and_then(Value::as_array)
                .unwrap_or(&empty)
                .iter()
                .filter_map(|r| Some(vec![fmt(f(r.get("lambda")?)?), fmt(f(r.get("p")?)?), fmt(f(r.get("moment")?)?)]))
                .collect()
        }
    }
}

pub fn to_csv(report: &Value, series: Series) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(series.header()).expect("in-memory write");
    for r in rows(report, series) {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_report_gives_header_only() {
        assert_eq!(to_csv(&json!({}), Series::Variance), "eps,rescaled_variance,se\n");
        assert_eq!(to_csv(&json!({"kind": "residual", "data": {"rows": []}}), Series::Residual), "radius,residual_norm,se\n");
    }

    #[test]
    fn fluctuation_rows_one_per_eps() {
        let r = json!({"kind": "fluctuate", "data": {"rows": [
            {"eps": 0.125, "rescaled": {"value": 1.0, "se": 0.1, "n": 4}},
            {"eps": 0.0625, "rescaled": {"value": 2.0, "se": 0.2, "n": 4}}
        ]}});
        assert_eq!(rows(&r, Series::Variance).len(), 2);
    }

    #[test]
    fn residual_rows_sorted() {
        let r = json!({"data": {"rows": [
            {"radius": 16, "residual": {"value": 1.0, "se": 0.1}},
            {"radius": 4, "residual": {"value": 3.0, "se": 0.1}},
            {"radius": 8, "residual": {"value": 2.0, "se": 0.1}}
        ]}});
        let radii: Vec<String> = rows(&r, Series::Residual).into_iter().map(|r| r[0].clone()).collect();
        assert_eq!(radii, ["4", "8", "16"]);
    }
}
