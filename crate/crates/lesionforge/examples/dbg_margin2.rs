use lesionforge::models::{build_resnet, build_dae, ResNetConfig, DaeConfig};
use lesionforge::nn::BnMode;
use lesionforge::tensor::Tensor;
use lesionforge::autograd::Tape;
use rand::Rng;

fn main() {
    let mut cfg = ResNetConfig::tiny();
    cfg.base_width = 2;
    cfg.input = (3, 8, 8);
    let graph = build_resnet::<f64>(&cfg, 123).unwrap();
    for seed in 0..6u64 {
        let mut r = lesionforge::rng::stream(seed, "m", 0);
        let n: usize = 4 * 3 * 8 * 8;
        let input = Tensor::from_vec(vec![4, 3, 8, 8], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(input);
        let _ = graph.forward(&mut tape, x, BnMode::Train).unwrap();
        println!("resnet seed {seed}: margin {:.3e}", tape.kink_margin());
    }
    let dcfg = DaeConfig { input: (3, 8, 8), encoder_channels: vec![4, 2] };
    let dae = build_dae::<f64>(&dcfg, 7).unwrap();
    for seed in 0..6u64 {
        let mut r = lesionforge::rng::stream(seed, "m", 1);
        let n: usize = 4 * 3 * 8 * 8;
        let input = Tensor::from_vec(vec![4, 3, 8, 8], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(input);
        let _ = dae.forward(&mut tape, x, BnMode::Train).unwrap();
        println!("dae seed {seed}: margin {:.3e}", tape.kink_margin());
    }
}
