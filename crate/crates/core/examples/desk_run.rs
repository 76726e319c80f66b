//! Desk-scale training run: synthetic scenes, timed training, evaluation.
//!
//! Usage: `desk_run [iterations] [train scenes] [eval scenes]`.

use std::time::Instant;

use maskpoint::contour::{make_labels, LabelConfig};
use maskpoint::synth::{generate_dataset, GeneratorConfig};
use maskpoint::train::{build_model, evaluate, train, InferenceConfig, TrainConfig};
use maskpoint::SceneRecord;

fn label(scenes: &mut [SceneRecord], k: usize) {
    let labels = LabelConfig {
        k,
        ..LabelConfig::default()
    };
    for s in scenes {
        for inst in &mut s.instances {
            inst.contour_points = Some(make_labels(&inst.mask, &labels).unwrap());
        }
    }
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (iterations, n_train, n_eval) = (arg(0, 800), arg(1, 200), arg(2, 50));

    let gen = GeneratorConfig::default();
    let mut train_scenes = generate_dataset(&gen, 0, n_train, 1).unwrap();
    let mut eval_scenes = generate_dataset(&gen, 10_000, n_eval, 2).unwrap();
    let config = TrainConfig {
        iterations,
        ..TrainConfig::desk()
    };
    label(&mut train_scenes, config.fusion.k);
    label(&mut eval_scenes, config.fusion.k);

    let mut model = build_model(&config).unwrap();
    let start = Instant::now();
    let mut window = [0.0; 5];
    let history = train(&mut model, &train_scenes, &config, |log| {
        let l = &log.loss;
        for (acc, v) in window
            .iter_mut()
            .zip([l.l_cls, l.l_box, l.l_mask, l.l_keypoint, l.total])
        {
            *acc += v / 50.0;
        }
        if (log.iteration + 1) % 50 == 0 {
            eprintln!(
                "{:4} {:6.1}s cls {:.3} box {:.3} mask {:.3} kp {:.3} total {:.3}",
                log.iteration + 1,
                start.elapsed().as_secs_f64(),
                window[0],
                window[1],
                window[2],
                window[3],
                window[4]
            );
            window = [0.0; 5];
        }
    })
    .unwrap();
    eprintln!(
        "iteration 10 total {:.3}, last {:.3}",
        history[10].total,
        history.last().unwrap().total
    );
    let trained = start.elapsed().as_secs_f64();
    let report = evaluate(&model, &eval_scenes, &InferenceConfig::default()).unwrap();
    println!(
        "train {trained:.1}s eval {:.1}s {}",
        start.elapsed().as_secs_f64() - trained,
        serde_json::to_string(&report).unwrap()
    );
}
