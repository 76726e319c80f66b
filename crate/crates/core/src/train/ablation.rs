//! Train-and-evaluate over a grid of configuration overrides.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{build_model, evaluate, train, InferenceConfig, TrainConfig};
use crate::contour::{make_labels, LabelConfig};
use crate::error::{Error, Result};
use crate::synth::SceneRecord;

/// One swept field and its values, in table order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// A `TrainConfig` field, a `FusionConfig` field (`design`, `mode`,
    /// `k`, `alpha`, ...) or a label field (`sampling`, `epsilon`).
    pub field: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Training and evaluation data, used by the command line.
    #[serde(default)]
    pub train_data: Option<String>,
    #[serde(default)]
    pub eval_data: Option<String>,
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub labels: LabelConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    /// Cells are the cross product of the axes, first axis outermost.
    pub sweep: Vec<SweepAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text with a header row; AP values in percent.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| {
                let fmt = |v: Option<f64>| match (v, &r.error) {
                    (Some(v), _) => format!("{:.1}", 100.0 * v),
                    (None, Some(_)) => "failed".to_string(),
                    (None, None) => "-".to_string(),
                };
                [r.setting.clone(), fmt(r.ap), fmt(r.ap50)]
            })
            .collect();
        let header = ["setting".to_string(), "AP".to_string(), "AP50".to_string()];
        let width = |i: usize| {
            cells
                .iter()
                .map(|c| c[i].chars().count())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        };
        let (w0, w1, w2) = (width(0), width(1), width(2));
        let mut out = String::new();
        for row in std::iter::once(&header).chain(cells.iter()) {
            out.push_str(&format!("{:<w0$}  {:>w1$}  {:>w2$}\n", row[0], row[1], row[2]));
        }
        out
    }
}

const FUSION_FIELDS: &[&str] = &["design", "reduction", "mode", "k", "use_center", "alpha", "enabled"];
const LABEL_FIELDS: &[&str] = &["sampling", "epsilon"];

/// A field name and the value it is set to.
type Override = (String, Value);

impl AblationGrid {
    /// `(setting name, overrides)` per cell.
    pub fn cells(&self) -> Vec<(String, Vec<Override>)> {
        let mut cells: Vec<(Vec<String>, Vec<Override>)> = vec![(Vec::new(), Vec::new())];
        for axis in &self.sweep {
            let mut next = Vec::new();
            for (names, overrides) in &cells {
                for v in &axis.values {
                    let mut names = names.clone();
                    names.push(match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    });
                    let mut overrides = overrides.clone();
                    overrides.push((axis.field.clone(), v.clone()));
                    next.push((names, overrides));
                }
            }
            cells = next;
        }
        if self.sweep.is_empty() {
            return vec![("base".to_string(), Vec::new())];
        }
        cells.into_iter().map(|(n, o)| (n.join(", "), o)).collect()
    }

    /// Training and label configs of one cell.
    pub fn configure(&self, overrides: &[(String, Value)]) -> Result<(TrainConfig, LabelConfig)> {
        let mut train = serde_json::to_value(&self.base)?;
        let mut labels = serde_json::to_value(self.labels)?;
        for (field, value) in overrides {
            let target: &mut Map<String, Value> = if FUSION_FIELDS.contains(&field.as_str()) {
                train["fusion"].as_object_mut().expect("fusion is an object")
            } else if LABEL_FIELDS.contains(&field.as_str()) {
                labels.as_object_mut().expect("labels are an object")
            } else {
                train.as_object_mut().expect("config is an object")
            };
            if !target.contains_key(field) {
                return Err(Error::Config(format!("unknown ablation field {field:?}")));
            }
            target.insert(field.clone(), value.clone());
        }
        let train: TrainConfig = serde_json::from_value(train)?;
        let mut labels: LabelConfig = serde_json::from_value(labels)?;
        labels.k = train.fusion.k;
        labels.use_center = train.fusion.use_center;
        Ok((train, labels))
    }
}

fn relabel(scenes: &[SceneRecord], labels: &LabelConfig) -> Result<Vec<SceneRecord>> {
    let mut out = scenes.to_vec();
    for scene in &mut out {
        for inst in &mut scene.instances {
            inst.contour_points = Some(make_labels(&inst.mask, labels)?);
        }
    }
    Ok(out)
}

fn run_cell(
    grid: &AblationGrid,
    overrides: &[(String, Value)],
    train_scenes: &[SceneRecord],
    eval_scenes: &[SceneRecord],
) -> Result<(f64, f64)> {
    let (config, labels) = grid.configure(overrides)?;
    let train_scenes = relabel(train_scenes, &labels)?;
    let eval_scenes = relabel(eval_scenes, &labels)?;
    let mut model = build_model(&config)?;
    train(&mut model, &train_scenes, &config, |_| {})?;
    let report = evaluate(&model, &eval_scenes, &grid.inference)?;
    Ok((report.mask_ap, report.ap50))
}

/// Trains and evaluates one model per cell on up to `jobs` worker threads.
/// Rows keep cell order whatever the scheduling, and every cell starts from
/// the same base seed, so results do not depend on `jobs`. A failing cell is
/// recorded in its row and the run continues. `progress` sees each row as it
/// finishes.
pub fn run_ablation(
    grid: &AblationGrid,
    train_scenes: &[SceneRecord],
    eval_scenes: &[SceneRecord],
    jobs: usize,
    mut progress: impl FnMut(&AblationRow),
) -> AblationTable {
    let cells = grid.cells();
    let run = |(setting, overrides): &(String, Vec<(String, Value)>)| match run_cell(
        grid,
        overrides,
        train_scenes,
        eval_scenes,
    ) {
        Ok((ap, ap50)) => AblationRow {
            setting: setting.clone(),
            ap: Some(ap),
            ap50: Some(ap50),
            error: None,
        },
        Err(e) => AblationRow {
            setting: setting.clone(),
            ap: None,
            ap50: None,
            error: Some(e.to_string()),
        },
    };
    let jobs = jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        let rows = cells
            .iter()
            .map(|cell| {
                let row = run(cell);
                progress(&row);
                row
            })
            .collect();
        return AblationTable { rows };
    }

    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<AblationRow>> = vec![None; cells.len()];
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, cells, run) = (&next, &cells, &run);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                if tx.send((i, run(cell))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, row) in rx {
            progress(&row);
            slots[i] = Some(row);
        }
    });
    AblationTable {
        rows: slots.into_iter().map(|r| r.expect("every cell reports")).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;

    fn grid(json: &str) -> AblationGrid {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn cells_keep_axis_order() {
        let g = grid(r#"{"sweep": [{"field": "alpha", "values": [1, 0.5, 0.2]}]}"#);
        let names: Vec<String> = g.cells().into_iter().map(|c| c.0).collect();
        assert_eq!(names, vec!["1", "0.5", "0.2"]);
        let (cfg, _) = g.configure(&g.cells()[2].1).unwrap();
        assert_eq!(cfg.fusion.alpha, 0.2);
    }

    #[test]
    fn cross_product_and_label_fields() {
        let g = grid(
            r#"{"sweep": [{"field": "mode", "values": ["add", "max"]},
                          {"field": "sampling", "values": ["uniform", "corner"]}]}"#,
        );
        let cells = g.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].0, "add, corner");
        let (cfg, labels) = g.configure(&cells[1].1).unwrap();
        assert_eq!(cfg.fusion.mode, FusionMode::Add);
        assert_eq!(labels.sampling, crate::contour::Sampling::Corner);
        assert_eq!(labels.k, cfg.fusion.k);
        let bad = grid(r#"{"sweep": [{"field": "colour", "values": [1]}]}"#);
        assert!(bad.configure(&bad.cells()[0].1).is_err());
    }

    #[test]
    fn text_table_layout() {
        let t = AblationTable {
            rows: vec![
                AblationRow {
                    setting: "add".into(),
                    ap: Some(0.25),
                    ap50: Some(0.5),
                    error: None,
                },
                AblationRow {
                    setting: "multiply".into(),
                    ap: None,
                    ap50: None,
                    error: Some("boom".into()),
                },
            ],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "setting       AP    AP50");
        assert_eq!(lines[1], "add         25.0    50.0");
        assert_eq!(lines[2], "multiply  failed  failed");
    }
}
