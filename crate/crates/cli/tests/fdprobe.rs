// Scratch diagnostic: per-parameter finite-difference sweep of the tiny
// end-to-end model, to localize a composition gradient bug. Delete me.

use msf_core::error::Result as CoreResult;
use msf_core::model::{self, ModelConfig, ModelParams};
use msf_core::synthgen::{generate_clip, SynthSpec};
use msf_core::tape::{finite_diff_check_entries, ParamId, ParamSet, Tape, Var};
use msf_core::tokenizer::VideoClip;

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::preset("desk").unwrap();
    cfg.d = 10;
    cfg.layers = 2;
    cfg.n_state = 3;
    cfg.patch = 4;
    cfg.frames = 4;
    cfg.height = 8;
    cfg.width = 8;
    cfg.scales = vec![3];
    cfg.classes = 4;
    cfg
}

fn forward_loss_with(
    tape: &mut Tape,
    set: &ParamSet,
    layout: &ModelParams,
    cfg: &ModelConfig,
    clip: &VideoClip,
    label: usize,
) -> CoreResult<Var> {
    let mut view = layout.clone();
    view.set = set.clone();
    let (logits, _) = model::forward(tape, clip, cfg, &view)?;
    model::cross_entropy(tape, logits, label)
}

#[test]
fn per_param_fd_sweep() {
    let cfg = tiny_cfg();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let spec = SynthSpec {
        classes: cfg.classes.min(10),
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        seed: 17,
        ..SynthSpec::default()
    };
    let (clip, label) = generate_clip(&spec, 2, 0).unwrap();
    let f = |tape: &mut Tape, set: &ParamSet| {
        forward_loss_with(tape, set, &params, &cfg, &clip, label)
    };
    let mut set = params.set.clone();
    let names: Vec<String> = (0..set.len())
        .map(|p| set.get(ParamId(p)).name.clone())
        .collect();
    // Analytic gradients once.
    set.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &set).unwrap();
    tape.backward(loss, &mut set).unwrap();
    let analytic: Vec<Vec<f64>> = (0..set.len())
        .map(|p| set.get(ParamId(p)).grad.data().to_vec())
        .collect();

    let eval = |set: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let loss = f(&mut tape, set).unwrap();
        tape.value(loss).item()
    };
    let _ = eval;

    for p in 0..set.len() {
        if !names[p].contains("a_log") {
            continue;
        }
        let n = set.get(ParamId(p)).value.numel();
        println!("== {} ==", names[p]);
        for i in 0..n {
            let mut per_step = Vec::new();
            for &h in &[1e-5f64, 1e-4, 1e-3] {
                let orig = set.get(ParamId(p)).value.data()[i];
                set.get_mut(ParamId(p)).value.data_mut()[i] = orig + h;
                let up = {
                    let mut tape = Tape::new();
                    let l = f(&mut tape, &set).unwrap();
                    tape.value(l).item()
                };
                set.get_mut(ParamId(p)).value.data_mut()[i] = orig - h;
                let down = {
                    let mut tape = Tape::new();
                    let l = f(&mut tape, &set).unwrap();
                    tape.value(l).item()
                };
                set.get_mut(ParamId(p)).value.data_mut()[i] = orig;
                per_step.push((up - down) / (2.0 * h));
            }
            let a = analytic[p][i];
            let rel = (a - per_step[0]).abs() / (per_step[0].abs() + 1e-12);
            if rel > 1e-4 {
                println!(
                    "  [{i}] analytic {a:+.6e}  fd(1e-5) {:+.6e}  fd(1e-4) {:+.6e}  fd(1e-3) {:+.6e}",
                    per_step[0], per_step[1], per_step[2]
                );
            }
        }
    }
    panic!("probe only");
}
