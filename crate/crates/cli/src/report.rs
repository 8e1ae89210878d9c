//! Key-per-line run reports.
//!
//! Every line is `key = value`. Floats use the shortest representation that
//! parses back to the same bits, so a report re-reads without loss.

use std::fmt::Write as _;

use rigidflow::{EgoMetrics, EnergyBreakdown, FlowMetrics, RigidTransform, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub size: usize,
    pub transform: Option<RigidTransform>,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub command: String,
    pub config: Vec<(String, String)>,
    /// Counts and other scalar facts about the inputs.
    pub info: Vec<(String, String)>,
    pub flow: Option<FlowMetrics>,
    pub ego_transform: Option<RigidTransform>,
    pub ego: Option<EgoMetrics>,
    pub energy: Option<EnergyBreakdown>,
    pub clusters: Vec<ClusterSummary>,
    /// Milliseconds per stage. Left empty unless asked for, so that reports
    /// of identical runs compare equal byte for byte.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("report line {line}: {message}")]
pub struct ReportParseError {
    pub line: usize,
    pub message: String,
}

type PartialCluster = (Option<usize>, Option<Option<RigidTransform>>, Option<bool>);

fn transform_text(t: &RigidTransform) -> String {
    let r = t.rotation();
    let v = t.translation();
    (0..3)
        .flat_map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)], v[i]])
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_transform(s: &str) -> Result<RigidTransform, String> {
    let v = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != 12 {
        return Err(format!("transform needs 12 values, found {}", v.len()));
    }
    let m = nalgebra::Matrix3::from_fn(|r, c| v[4 * r + c]);
    RigidTransform::new(m, Vector3::new(v[3], v[7], v[11])).map_err(|e| e.to_string())
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        line("command", &self.command);
        for (k, v) in &self.config {
            line(&format!("config.{k}"), v);
        }
        for (k, v) in &self.info {
            line(&format!("info.{k}"), v);
        }
        if let Some(m) = &self.flow {
            line("flow.epe3d_mean", &m.epe3d_mean);
            line("flow.epe3d_median", &m.epe3d_median);
            line("flow.acc3ds", &m.acc3ds);
            line("flow.acc3dr", &m.acc3dr);
            line("flow.outliers", &m.outliers);
        }
        if let Some(t) = &self.ego_transform {
            line("ego.transform", &transform_text(t));
        }
        if let Some(m) = &self.ego {
            line("ego.rre_deg", &m.rre);
            line("ego.rte", &m.rte);
        }
        if let Some(e) = &self.energy {
            for (k, v) in [
                ("l_bg", e.l_bg),
                ("l_trans", e.l_trans),
                ("l_inlier", e.l_inlier),
                ("l_ego", e.l_ego),
                ("l_rigid", e.l_rigid),
                ("l_cd", e.l_cd),
                ("l_fg", e.l_fg),
                ("total", e.total),
            ] {
                line(&format!("energy.{k}"), &v);
            }
        }
        line("cluster.count", &self.clusters.len());
        for (i, c) in self.clusters.iter().enumerate() {
            line(&format!("cluster.{i}.size"), &c.size);
            let t = c.transform.as_ref().map_or_else(|| "none".to_string(), transform_text);
            line(&format!("cluster.{i}.transform"), &t);
            line(&format!("cluster.{i}.refined"), &c.refined);
        }
        for (k, v) in &self.timings {
            line(&format!("timing.{k}_ms"), v);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ReportParseError> {
        let mut r = RunReport::default();
        let mut flow = [None; 5];
        let mut ego = [None; 2];
        let mut energy = [None; 8];
        let mut clusters: Vec<PartialCluster> = Vec::new();
        let mut count = None;

        for (no, raw) in text.lines().enumerate() {
            let err = |message: String| ReportParseError { line: no + 1, message };
            if raw.trim().is_empty() {
                continue;
            }
            let (k, v) = raw.split_once(" = ").ok_or_else(|| err("expected `key = value`".into()))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
            if k == "command" {
                r.command = v.to_string();
            } else if let Some(k) = k.strip_prefix("config.") {
                r.config.push((k.to_string(), v.to_string()));
            } else if let Some(k) = k.strip_prefix("info.") {
                r.info.push((k.to_string(), v.to_string()));
            } else if let Some(k) = k.strip_prefix("flow.") {
                let i = ["epe3d_mean", "epe3d_median", "acc3ds", "acc3dr", "outliers"]
                    .iter()
                    .position(|n| *n == k)
                    .ok_or_else(|| err(format!("unknown flow metric `{k}`")))?;
                flow[i] = Some(num(v)?);
            } else if k == "ego.transform" {
                r.ego_transform = Some(parse_transform(v).map_err(err)?);
            } else if k == "ego.rre_deg" {
                ego[0] = Some(num(v)?);
            } else if k == "ego.rte" {
                ego[1] = Some(num(v)?);
            } else if let Some(k) = k.strip_prefix("energy.") {
                let i = ["l_bg", "l_trans", "l_inlier", "l_ego", "l_rigid", "l_cd", "l_fg", "total"]
                    .iter()
                    .position(|n| *n == k)
                    .ok_or_else(|| err(format!("unknown energy term `{k}`")))?;
                energy[i] = Some(num(v)?);
            } else if k == "cluster.count" {
                let n: usize = v.parse().map_err(|e| err(format!("{k}: {e}")))?;
                clusters.resize(n, (None, None, None));
                count = Some(n);
            } else if let Some(rest) = k.strip_prefix("cluster.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| err(format!("bad key `{k}`")))?;
                let idx: usize = idx.parse().map_err(|e| err(format!("{k}: {e}")))?;
                let c = clusters
                    .get_mut(idx)
                    .ok_or_else(|| err(format!("cluster {idx} beyond cluster.count")))?;
                match field {
                    "size" => c.0 = Some(v.parse().map_err(|e| err(format!("{k}: {e}")))?),
                    "transform" if v == "none" => c.1 = Some(None),
                    "transform" => c.1 = Some(Some(parse_transform(v).map_err(err)?)),
                    "refined" => c.2 = Some(v.parse().map_err(|e| err(format!("{k}: {e}")))?),
                    _ => return Err(err(format!("unknown cluster field `{field}`"))),
                }
            } else if let Some(k) = k.strip_prefix("timing.") {
                let name = k.strip_suffix("_ms").ok_or_else(|| err(format!("timing key `{k}` lacks _ms")))?;
                r.timings.push((name.to_string(), num(v)?));
            } else {
                return Err(err(format!("unknown key `{k}`")));
            }
        }

        let whole = |name: &str, vals: &[Option<f64>]| -> Result<Option<Vec<f64>>, ReportParseError> {
            match vals.iter().filter(|v| v.is_some()).count() {
                0 => Ok(None),
                n if n == vals.len() => Ok(Some(vals.iter().map(|v| v.expect("checked")).collect())),
                _ => Err(ReportParseError {
                    line: 0,
                    message: format!("incomplete {name} section"),
                }),
            }
        };
        r.flow = whole("flow", &flow)?.map(|v| FlowMetrics {
            epe3d_mean: v[0],
            epe3d_median: v[1],
            acc3ds: v[2],
            acc3dr: v[3],
            outliers: v[4],
        });
        r.ego = whole("ego", &ego)?.map(|v| EgoMetrics { rre: v[0], rte: v[1] });
        r.energy = whole("energy", &energy)?.map(|v| EnergyBreakdown {
            l_bg: v[0],
            l_trans: v[1],
            l_inlier: v[2],
            l_ego: v[3],
            l_rigid: v[4],
            l_cd: v[5],
            l_fg: v[6],
            total: v[7],
        });
        if count.is_none() {
            return Err(ReportParseError {
                line: 0,
                message: "missing cluster.count".into(),
            });
        }
        r.clusters = clusters
            .into_iter()
            .enumerate()
            .map(|(i, c)| match c {
                (Some(size), Some(transform), Some(refined)) => Ok(ClusterSummary { size, transform, refined }),
                _ => Err(ReportParseError {
                    line: 0,
                    message: format!("cluster {i} is incomplete"),
                }),
            })
            .collect::<Result<_, _>>()?;
        Ok(r)
    }

    /// Looks up a value by its full key, as written by [`RunReport::to_text`].
    pub fn get(text: &str, key: &str) -> Option<String> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.to_string())
    }
}
