//! Figure and table presets. Paths are relative to the data root and follow
//! each dataset's own distribution file names.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::{json, Value};

use super::{
    ArmSpec, DataSource, DatasetSpec, ExperimentConfig, GramSpec, InitSpec, MetaSpec, MetricsSpec, NetSpec,
    PretrainSpec, Stage, SweepAxis, SweepPoint, TrainSpec,
};
use crate::data::{CifarVariant, TransformSpec};
use crate::error::{bail, Result};
use crate::learn::Rule;
use crate::noise::NoiseDistribution;

pub const PRESET_IDS: [&str; 14] = [
    "fig1e", "fig1f", "fig2b", "fig2e", "fig2g", "fig3", "fig4d", "fig4ef", "fig4gh", "fig5b", "fig5c", "fig6a",
    "fig6c", "table1",
];

/// Upper bound on data epochs for runs that stop on patience.
pub const CONVERGENCE_EPOCH_CAP: usize = 300;

fn noise() -> PretrainSpec {
    PretrainSpec {
        distribution: NoiseDistribution::STANDARD_NORMAL,
        total_samples: 500_000,
        samples_per_epoch: 5000,
        batch_size: 64,
        learning_rate: 1e-4,
    }
}

fn train(epochs: usize, patience: Option<usize>) -> TrainSpec {
    TrainSpec { rule: Rule::Fa, learning_rate: 1e-4, batch_size: 64, epochs, patience, shuffle: true }
}

fn net(input_dim: usize, hidden: &[usize], classes: usize) -> NetSpec {
    NetSpec { input_dim, hidden: hidden.to_vec(), classes }
}

/// IDX pair of one split of an MNIST-format dataset.
pub fn idx(dir: &str, test: bool, subset: Option<usize>) -> DatasetSpec {
    let prefix = if test { "t10k" } else { "train" };
    DatasetSpec {
        source: DataSource::Idx {
            images: PathBuf::from(format!("{dir}/{prefix}-images-idx3-ubyte")),
            labels: PathBuf::from(format!("{dir}/{prefix}-labels-idx1-ubyte")),
        },
        subset,
        transform: None,
    }
}

pub fn cifar10(test: bool) -> DatasetSpec {
    let files = if test {
        vec![PathBuf::from("cifar-10-batches-bin/test_batch.bin")]
    } else {
        (1..=5).map(|i| PathBuf::from(format!("cifar-10-batches-bin/data_batch_{i}.bin"))).collect()
    };
    DatasetSpec { source: DataSource::Cifar { files, variant: CifarVariant::C10 }, subset: None, transform: None }
}

pub fn cifar100(test: bool) -> DatasetSpec {
    let file = if test { "cifar-100-binary/test.bin" } else { "cifar-100-binary/train.bin" };
    DatasetSpec {
        source: DataSource::Cifar { files: vec![PathBuf::from(file)], variant: CifarVariant::C100 },
        subset: None,
        transform: None,
    }
}

pub fn stl10(test: bool) -> DatasetSpec {
    let split = if test { "test" } else { "train" };
    DatasetSpec {
        source: DataSource::Stl10 {
            images: PathBuf::from(format!("stl10_binary/{split}_X.bin")),
            labels: PathBuf::from(format!("stl10_binary/{split}_y.bin")),
        },
        subset: None,
        transform: None,
    }
}

pub fn usps_test() -> DatasetSpec {
    DatasetSpec { source: DataSource::Usps { path: PathBuf::from("usps/usps.t") }, subset: None, transform: None }
}

/// Directory name under the data root for the MNIST-format families.
pub fn family_dir(name: &str) -> Option<&'static str> {
    match name {
        "mnist" => Some("mnist"),
        "fmnist" | "fashion-mnist" => Some("fashion-mnist"),
        "kmnist" => Some("kmnist"),
        _ => None,
    }
}

fn data_arm(name: &str, rule: Rule, pretrain: bool, train_set: &str, test_set: &str) -> ArmSpec {
    let mut stages = Vec::new();
    if pretrain {
        stages.push(Stage::Noise { distribution: None });
    }
    stages.push(Stage::Data { rule: Some(rule), train: train_set.into(), test: test_set.into() });
    ArmSpec { name: name.into(), init: InitSpec::He, stages }
}

fn noise_arm(name: &str) -> ArmSpec {
    ArmSpec { name: name.into(), init: InitSpec::He, stages: vec![Stage::Noise { distribution: None }] }
}

/// The three arms compared throughout: FA, FA after noise pretraining, BP.
fn comparison_arms(train_set: &str, test_set: &str) -> Vec<ArmSpec> {
    vec![
        data_arm("fa", Rule::Fa, false, train_set, test_set),
        data_arm("fa_pretrain", Rule::Fa, true, train_set, test_set),
        data_arm("bp", Rule::Bp, false, train_set, test_set),
    ]
}

fn fa_pair(train_set: &str, test_set: &str) -> Vec<ArmSpec> {
    vec![
        data_arm("fa", Rule::Fa, false, train_set, test_set),
        data_arm("fa_pretrain", Rule::Fa, true, train_set, test_set),
    ]
}

fn base(id: &str, net: NetSpec, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: id.into(),
        net,
        trials,
        master_seed: 0,
        scale: 1.0,
        pretrain: None,
        train: None,
        datasets: BTreeMap::new(),
        arms: Vec::new(),
        metrics: MetricsSpec::default(),
        evals: Vec::new(),
        sweep: Vec::new(),
        output_dir: PathBuf::from(format!("runs/{id}")),
        data_dir: None,
        save_models: true,
        plots: true,
    }
}

fn mnist_pair(cfg: &mut ExperimentConfig, train_n: Option<usize>, test_n: Option<usize>) {
    cfg.datasets.insert("mnist_train".into(), idx("mnist", false, train_n));
    cfg.datasets.insert("mnist_test".into(), idx("mnist", true, test_n));
}

fn point(label: &str, set: Vec<(&str, Value)>) -> SweepPoint {
    SweepPoint { label: label.into(), set: set.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
}

/// Sweep over the five image datasets for a two-arm-set `train`/`test` pair.
fn dataset_axis() -> SweepAxis {
    let fam = |name: &str, dir: &str| {
        point(
            name,
            vec![
                ("datasets.train", serde_json::to_value(idx(dir, false, None)).expect("json")),
                ("datasets.test", serde_json::to_value(idx(dir, true, None)).expect("json")),
                ("net.input_dim", json!(784)),
                ("net.classes", json!(10)),
            ],
        )
    };
    let colour = |name: &str, tr: DatasetSpec, te: DatasetSpec, classes: usize| {
        point(
            name,
            vec![
                ("datasets.train", serde_json::to_value(tr).expect("json")),
                ("datasets.test", serde_json::to_value(te).expect("json")),
                ("net.input_dim", json!(3072)),
                ("net.classes", json!(classes)),
            ],
        )
    };
    SweepAxis {
        name: "dataset".into(),
        points: vec![
            fam("mnist", "mnist"),
            fam("fmnist", "fashion-mnist"),
            colour("cifar10", cifar10(false), cifar10(true), 10),
            colour("cifar100", cifar100(false), cifar100(true), 100),
            colour("stl10", stl10(false), stl10(true), 10),
        ],
    }
}

fn depth_axis(depths: &[usize]) -> SweepAxis {
    SweepAxis {
        name: "depth".into(),
        points: depths
            .iter()
            .map(|&d| point(&format!("depth{d}"), vec![("net.hidden", json!(vec![100; d - 1]))]))
            .collect(),
    }
}

fn affine(translate: f64, scale: (f64, f64), rotate: f64, seed: u64) -> TransformSpec {
    TransformSpec { translate_frac: (-translate, translate), scale, rotate_deg: (-rotate, rotate), seed }
}

/// Fully resolved configuration for a figure or table id.
pub fn preset(id: &str) -> Result<ExperimentConfig> {
    let two = net(784, &[100], 10);
    let three = net(784, &[100, 100], 10);
    let cfg = match id {
        "fig1e" => {
            let mut c = base(id, two, 10);
            c.pretrain = Some(noise());
            c.arms = vec![noise_arm("fa_pretrain")];
            c.metrics.angles = vec![0, 1];
            c.metrics.distance = vec![1];
            c
        }
        "fig1f" => {
            let mut c = base(id, two, 10);
            c.pretrain = Some(noise());
            c.arms = vec![noise_arm("fa_pretrain")];
            c.metrics.angles = vec![1];
            c.save_models = false;
            let mut points: Vec<SweepPoint> = (0..=20)
                .map(|i| {
                    let std = i as f64 / 10.0;
                    point(
                        &format!("gaussian_std{std:.1}"),
                        vec![("pretrain.distribution", json!({"kind": "gaussian", "mean": 0.0, "std": std}))],
                    )
                })
                .collect();
            for a in [0.5, 1.0, 2.0] {
                points.push(point(
                    &format!("uniform_pm{a:.1}"),
                    vec![("pretrain.distribution", json!({"kind": "uniform", "low": -a, "high": a}))],
                ));
            }
            c.sweep = vec![SweepAxis { name: "distribution".into(), points }];
            c
        }
        "fig2b" => {
            let mut c = base(id, two, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(100, None));
            mnist_pair(&mut c, Some(5000), Some(5000));
            c.arms = comparison_arms("mnist_train", "mnist_test");
            c.metrics.angles = vec![1];
            c
        }
        "fig2e" | "fig2g" => {
            let mut c = base(id, two, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(100, None));
            mnist_pair(&mut c, Some(5000), Some(5000));
            let data = Stage::Data { rule: Some(Rule::Fa), train: "mnist_train".into(), test: "mnist_test".into() };
            let random = Stage::Noise { distribution: None };
            c.arms = if id == "fig2e" {
                vec![noise_arm("random"), ArmSpec { name: "data".into(), init: InitSpec::He, stages: vec![data] }]
            } else {
                vec![
                    ArmSpec {
                        name: "random_data".into(),
                        init: InitSpec::He,
                        stages: vec![random.clone(), data.clone()],
                    },
                    ArmSpec { name: "data_random".into(), init: InitSpec::He, stages: vec![data, random] },
                ]
            };
            c.metrics.distance = vec![1];
            c.metrics.angles = vec![1];
            c.metrics.trajectory = Some(1);
            c
        }
        "fig3" | "table1" => {
            let mut c = base(id, two, 3);
            c.pretrain = Some(noise());
            c.train = Some(train(CONVERGENCE_EPOCH_CAP, Some(10)));
            c.datasets.insert("train".into(), idx("mnist", false, None));
            c.datasets.insert("test".into(), idx("mnist", true, None));
            c.arms = comparison_arms("train", "test");
            c.save_models = false;
            c.sweep = vec![dataset_axis()];
            if id == "fig3" {
                c.sweep.push(depth_axis(&[2, 3, 4, 5]));
            }
            c
        }
        "fig4d" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.arms = vec![noise_arm("fa_pretrain")];
            c.metrics.effective_rank = vec![0, 1, 2];
            c
        }
        "fig4ef" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(500, None));
            mnist_pair(&mut c, Some(1600), Some(1000));
            c.arms = fa_pair("mnist_train", "mnist_test");
            c.metrics.gap = true;
            c.save_models = false;
            c.sweep =
                vec![SweepAxis::over("datasets.mnist_train.subset", [100, 200, 400, 800, 1600].map(|n| json!(n)))];
            c
        }
        "fig4gh" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(500, None));
            mnist_pair(&mut c, Some(1600), Some(1000));
            c.arms = fa_pair("mnist_train", "mnist_test");
            c.metrics.gap = true;
            c.metrics.gram = Some(GramSpec { dataset: "mnist_test".into(), layer: None });
            c.save_models = false;
            c.sweep = vec![depth_axis(&[3, 4, 5, 6, 7])];
            c
        }
        "fig5b" | "fig5c" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(100, None));
            mnist_pair(&mut c, Some(5000), Some(5000));
            c.arms = fa_pair("mnist_train", "mnist_test");
            if id == "fig5b" {
                let variants = [
                    ("translated", affine(0.05, (1.0, 1.0), 0.0, 51)),
                    ("scaled", affine(0.0, (0.8, 1.2), 0.0, 52)),
                    ("rotated", affine(0.0, (1.0, 1.0), 25.0, 53)),
                    ("affine", affine(0.05, (0.8, 1.2), 25.0, 54)),
                ];
                for (name, t) in variants {
                    let mut spec = idx("mnist", true, Some(5000));
                    spec.transform = Some(t);
                    let key = format!("mnist_{name}");
                    c.datasets.insert(key.clone(), spec);
                    c.evals.push(key);
                }
            } else {
                c.datasets.insert("usps".into(), usps_test());
                c.evals.push("usps".into());
            }
            c.evals.insert(0, "mnist_test".into());
            c
        }
        "fig6a" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.arms = vec![noise_arm("fa_pretrain")];
            let mut tasks = Vec::new();
            for t in ["mnist", "fmnist", "kmnist"] {
                c.datasets.insert(t.into(), idx(family_dir(t).expect("known family"), true, None));
                tasks.push(t.to_string());
            }
            c.metrics.meta = Some(MetaSpec {
                tasks,
                shots_per_class: 10,
                inner_steps: 10,
                inner_lr: 1e-3,
                query_per_class: 10,
                every: 25,
            });
            c
        }
        "fig6c" => {
            let mut c = base(id, three, 10);
            c.pretrain = Some(noise());
            c.train = Some(train(100, None));
            for t in ["mnist", "fmnist", "kmnist"] {
                let dir = family_dir(t).expect("known family");
                c.datasets.insert(format!("{t}_train"), idx(dir, false, Some(5000)));
                c.datasets.insert(format!("{t}_test"), idx(dir, true, Some(5000)));
                let (tr, te) = (format!("{t}_train"), format!("{t}_test"));
                c.arms.push(data_arm(&format!("fa_{t}"), Rule::Fa, false, &tr, &te));
                c.arms.push(data_arm(&format!("fa_pretrain_{t}"), Rule::Fa, true, &tr, &te));
            }
            c.save_models = false;
            c
        }
        other => bail!(Usage, "unknown preset '{other}'; valid ids: {}", PRESET_IDS.join(", ")),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for id in PRESET_IDS {
            let c = preset(id).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{id}: {e}"));
            let round = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(round, c, "{id}");
        }
        assert!(preset("fig9").is_err());
    }

    #[test]
    fn table_values() {
        let c = preset("fig1e").unwrap();
        assert_eq!(c.dims(), vec![784, 100, 10]);
        let p = c.pretrain.unwrap();
        assert_eq!((p.total_samples, p.batch_size, p.learning_rate), (500_000, 64, 1e-4));
        let c = preset("fig4ef").unwrap();
        assert_eq!(c.dims(), vec![784, 100, 100, 10]);
        assert_eq!(c.train.as_ref().unwrap().epochs, 500);
        assert_eq!(c.sweep[0].points.len(), 5);
        let c = preset("fig5b").unwrap();
        let t = c.datasets["mnist_affine"].transform.clone().unwrap();
        assert_eq!((t.translate_frac, t.scale, t.rotate_deg), ((-0.05, 0.05), (0.8, 1.2), (-25.0, 25.0)));
    }

    #[test]
    fn sweep_points_override_cleanly() {
        for id in ["fig1f", "fig3", "fig4ef", "fig4gh", "table1"] {
            let c = preset(id).unwrap();
            for axis in &c.sweep {
                for p in &axis.points {
                    let sets: Vec<(String, Value)> = p.set.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                    let mut o = c.with_overrides(&sets).unwrap();
                    o.sweep.clear();
                    o.validate().unwrap_or_else(|e| panic!("{id}/{}: {e}", p.label));
                }
            }
        }
    }
}
