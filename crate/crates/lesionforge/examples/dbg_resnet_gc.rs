use indexmap::IndexMap;
use lesionforge::gradcheck::{find_stable_seed, grad_check, probe_margin};
use lesionforge::models::{build_resnet, ResNetConfig};
use lesionforge::nn::BnMode;
use lesionforge::tensor::Tensor;
use lesionforge::rng;
use rand::Rng;

fn main() {
    let mut cfg = ResNetConfig::tiny();
    cfg.base_width = 2;
    cfg.input = (3, 8, 8);
    let graph = build_resnet::<f64>(&cfg, rng::derive(11, "suite-init", 0)).unwrap();
    let param_names: Vec<String> = graph.param_names().map(String::from).collect();
    let labels = vec![0usize, 1, 2, 3];
    let gen = |seed: u64| {
        let mut r = rng::stream(seed, "suite-model", 0);
        let mut tensors = vec![("input".to_string(), {
            let n = 4 * 3 * 8 * 8;
            Tensor::from_vec(vec![4, 3, 8, 8], (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        })];
        for name in &param_names {
            let base = graph.param(name).unwrap();
            let data = base.data().iter().map(|&v| v + r.gen_range(-0.05..0.05)).collect();
            tensors.push((name.clone(), Tensor::from_vec(base.shape().to_vec(), data).unwrap()));
        }
        tensors
    };
    let pn = param_names.clone();
    let g = &graph;
    let build = move |tape: &mut lesionforge::autograd::Tape<f64>, ids: &[lesionforge::autograd::ValueId]| {
        let mut map = IndexMap::new();
        for (i, name) in pn.iter().enumerate() {
            map.insert(name.clone(), ids[i + 1]);
        }
        let pass = g.forward_bound(tape, ids[0], BnMode::Train, map)?;
        tape.softmax_cross_entropy(pass.output, &labels)
    };
    let stable = find_stable_seed(rng::derive(11, "suite-case", 100), 200, 1e-3, |s| probe_margin(&gen(s), &build)).unwrap();
    let tensors = gen(stable);
    let report = grad_check(&tensors, 1e-4, Some(6), stable, &build).unwrap();
    let mut per = report.per_tensor.clone();
    per.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (name, err) in per.iter().take(8) {
        println!("{name}: {err:.3e}");
    }
    println!("margin {:.3e}", report.kink_margin);
}
