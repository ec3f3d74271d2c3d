use indexmap::IndexMap;
use lesionforge::gradcheck::probe_margin;
use lesionforge::models::{build_resnet, ResNetConfig};
use lesionforge::nn::BnMode;
use lesionforge::tensor::Tensor;
use rand::Rng;

fn main() {
    let mut cfg = ResNetConfig::tiny();
    cfg.base_width = 2;
    cfg.input = (3, 8, 8);
    let graph = build_resnet::<f64>(&cfg, 123).unwrap();
    let param_names: Vec<String> = graph.param_names().map(String::from).collect();
    for seed in 0..8u64 {
        let mut r = lesionforge::rng::stream(seed, "m", 0);
        let n: usize = 2 * 3 * 8 * 8;
        let input = Tensor::from_vec(vec![2, 3, 8, 8], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tensors = vec![("input".to_string(), input)];
        for name in &param_names {
            tensors.push((name.clone(), graph.param(name).unwrap().clone()));
        }
        let g2 = graph.cast::<f64>();
        let pn = param_names.clone();
        let m = probe_margin(&tensors, &move |tape, ids| {
            let mut map = IndexMap::new();
            for (i, name) in pn.iter().enumerate() {
                map.insert(name.clone(), ids[i + 1]);
            }
            let pass = g2.forward_bound(tape, ids[0], BnMode::Train, map)?;
            tape.softmax_cross_entropy(pass.output, &[0, 1])
        })
        .unwrap();
        println!("seed {seed}: margin {m:.3e}");
    }
}
