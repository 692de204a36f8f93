//! Scratch probe: direction-agreement rate vs probe-steer magnitude.

use roadcast_core::data::{ActionVector, HistoryWindow};
use roadcast_core::metrics::mse_image;
use roadcast_core::roadworld::generate;
use roadcast_core::tensor::Tensor;
use roadcast_core::{load_checkpoint, RoadworldConfig};

fn main() {
    let config = RoadworldConfig {
        seed: 21,
        n_frames: 2000,
        noise_sigma: 0.0,
        ..RoadworldConfig::default()
    };
    let log = generate(&config).unwrap();
    let mut state = config.initial_state();
    let mut states = vec![state];
    for action in &log.actions {
        state = config.step(state, *action);
        states.push(state);
    }

    let (model, stats) = load_checkpoint("/tmp/smoke/probe_b4/best.advt").unwrap();
    for magnitude in [1.0f32, 2.0, 3.0] {
        let plus = ActionVector::new(0.0, magnitude, 0.0);
        let minus = ActionVector::new(0.0, -magnitude, 0.0);
        let (mut correct, mut distinct, total) = (0usize, 0usize, 100usize);
        let (mut bound_n, mut bound_correct, mut interior_n, mut interior_correct) =
            (0usize, 0usize, 0usize, 0usize);
        for i in 0..total {
            let t = 3 + i * 19;
            let frames: Vec<&Tensor<f32>> = log.frames[t - 3..=t].iter().collect();
            let hist = HistoryWindow::from_frames(&frames).unwrap();
            let pred_plus = model
                .predict(&hist, &plus.normalize(&stats))
                .unwrap()
                .frame
                .clamp(0.0, 1.0);
            let pred_minus = model
                .predict(&hist, &minus.normalize(&stats))
                .unwrap()
                .frame
                .clamp(0.0, 1.0);
            let true_plus = config.render(config.step(states[t], plus), 0.0);
            let true_minus = config.render(config.step(states[t], minus), 0.0);
            let near_bound =
                states[t].lateral.abs() >= config.lateral_max - 2.0 * magnitude as f64;
            let ok = mse_image(&pred_plus, &true_plus).unwrap()
                < mse_image(&pred_plus, &true_minus).unwrap();
            if ok {
                correct += 1;
            }
            if near_bound {
                bound_n += 1;
                bound_correct += ok as usize;
            } else {
                interior_n += 1;
                interior_correct += ok as usize;
            }
            if mse_image(&pred_plus, &pred_minus).unwrap() > 0.0 {
                distinct += 1;
            }
        }
        println!(
            "magnitude {magnitude}: correct {correct}/{total} distinct {distinct}/{total} \
             | interior {interior_correct}/{interior_n} bound {bound_correct}/{bound_n}"
        );
    }
}
