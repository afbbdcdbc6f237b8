use promptseg::attention::{attention_transfer_var, onehot, AttentionConfig};
use promptseg::image::ClassMap;
use promptseg::losses::{cross_entropy_var, Ignore};
use promptseg::segnet::{NetConfig, NetVars, Network};
use promptseg::tensor::{grad_check, Graph, Tensor, Var};
use promptseg::Result;

fn tiny_net(seed: u64) -> Network {
    Network::build(NetConfig {
        depth: 1,
        base_width: 2,
        seed,
        ..NetConfig::default()
    })
    .unwrap()
}

/// Parameters with biases moved off zero, so no ReLU input sits exactly on
/// its kink in regions the receptive field sees as all zeros.
fn params_of(net: &Network) -> Vec<Tensor> {
    net.params()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let v = &p.value;
            if v.shape().len() == 1 {
                Tensor::from_fn(v.shape().to_vec(), |i| 0.05 * ((i + 3 * k) as f64 * 1.9).sin() + 0.02)
            } else {
                v.clone()
            }
        })
        .collect()
}

fn image(h: usize, w: usize, salt: f64) -> Tensor {
    Tensor::from_fn([1, 1, h, w], |i| 0.5 + 0.45 * ((i as f64) * 0.73 + salt).sin())
}

fn stripes(h: usize, w: usize) -> ClassMap {
    ClassMap::new(h, w, (0..h * w).map(|i| (i % w).is_multiple_of(3) as u8).collect()).unwrap()
}

fn flat(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let e = g.index(v, 0)?;
    g.reshape(e, &[s[1], s[2] * s[3]])
}

#[test]
fn full_one_shot_graph() {
    let net = tiny_net(3);
    let params = params_of(&net);
    let (target, prompt) = (image(8, 8, 0.1), image(4, 4, 1.7));
    let (y, q) = (stripes(8, 8), stripes(4, 4));
    let cfg = AttentionConfig::new(2.0).unwrap();
    let r = grad_check(&params, 1e-6, |g, v| {
        let vars = NetVars::from(v.to_vec());
        let x = g.input(target.clone())?;
        let x = net.forward(g, &vars, x)?;
        let x = flat(g, x)?;
        let p = g.input(prompt.clone())?;
        let p = net.forward(g, &vars, p)?;
        let p = flat(g, p)?;
        let qv = g.input(onehot(&q, 2)?.tensor().clone())?;
        let o = attention_transfer_var(g, x, p, qv, &cfg)?;
        cross_entropy_var(g, o, &y, Ignore::Reject)
    })
    .unwrap();
    println!("{r:?}");
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

fn rand_tensor(shape: &[usize], seed: u64, salt: &str) -> Tensor {
    use rand::Rng;
    let mut r = promptseg::rng::stream(seed, salt, 0);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights so every output element matters.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(rand_tensor(g.shape(y), seed, "weights"))?;
    let m = g.mul(y, w)?;
    g.sum_all(m)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("conv2d", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], |g, v| g.conv2d(v[0], v[1], v[2])),
        ("conv2d_1x1", vec![vec![1, 3, 4, 4], vec![2, 3, 1, 1], vec![2]], |g, v| g.conv2d(v[0], v[1], v[2])),
        ("maxpool2", vec![vec![2, 2, 4, 6]], |g, v| g.maxpool2(v[0])),
        ("upsample2", vec![vec![1, 2, 3, 2]], |g, v| g.upsample2(v[0])),
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 5]], |g, v| g.transpose(v[0])),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![7]], |g, v| g.scale(v[0], -1.7)),
        ("relu", vec![vec![4, 4]], |g, v| g.relu(v[0])),
        ("exp", vec![vec![6]], |g, v| g.exp(v[0])),
        ("log", vec![vec![6]], |g, v| {
            let e = g.exp(v[0])?;
            g.log(e)
        }),
        ("sum_axis0", vec![vec![3, 4]], |g, v| g.sum(v[0], 0)),
        ("sum_axis1", vec![vec![3, 4, 2]], |g, v| g.sum(v[0], 1)),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0], 1)),
        ("softmax_axis0", vec![vec![3, 5]], |g, v| g.softmax(v[0], 0)),
        ("log_softmax", vec![vec![4, 3]], |g, v| g.log_softmax(v[0], 0)),
        ("concat", vec![vec![2, 3, 2], vec![2, 1, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("index", vec![vec![3, 2, 2]], |g, v| g.index(v[0], 1)),
        ("stack", vec![vec![2, 2], vec![2, 2]], |g, v| g.stack(&[v[0], v[1]])),
        ("attention", vec![vec![2, 9], vec![2, 4], vec![3, 4]], |g, v| g.attention(v[0], v[1], v[2], 0.7)),
    ]
}

#[test]
fn every_primitive_at_ten_seeds() {
    for (name, shapes, build) in primitives() {
        for seed in 0..10 {
            let params: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_tensor(s, seed, &format!("{name}.{i}")))
                .collect();
            let r = grad_check(&params, 1e-6, |g, v| {
                let y = build(g, v)?;
                weighted(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn wrong_derivative_is_caught() {
    let p = rand_tensor(&[5], 1, "fault");
    let r = grad_check(&[p], 1e-6, |g, v| {
        // sin with a cos·1.1 slope.
        let y = g.map(v[0], |x| (x.sin(), 1.1 * x.cos()))?;
        g.sum_all(y)
    })
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn stage1_graph() {
    let net = tiny_net(8);
    let params = params_of(&net);
    let (target, prompt) = (image(8, 8, 0.4), image(4, 4, 2.2));
    let q = stripes(4, 4);
    let cfg = AttentionConfig::new(2.0).unwrap();
    // The pseudo mask is taken at the base point and held fixed, as the
    // argmax is piecewise constant.
    let mask = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let vars = NetVars::from(vars);
        let x = g.input(target.clone()).unwrap();
        let x = net.forward(&mut g, &vars, x).unwrap();
        let x = flat(&mut g, x).unwrap();
        let p = g.input(prompt.clone()).unwrap();
        let p = net.forward(&mut g, &vars, p).unwrap();
        let p = flat(&mut g, p).unwrap();
        let qv = g.input(onehot(&q, 2).unwrap().tensor().clone()).unwrap();
        let o = attention_transfer_var(&mut g, x, p, qv, &cfg).unwrap();
        promptseg::losses::pseudo_mask_of(g.value(o), 8, 8).unwrap()
    };
    let r = grad_check(&params, 1e-6, |g, v| {
        let vars = NetVars::from(v.to_vec());
        let x = g.input(target.clone())?;
        let x = net.forward(g, &vars, x)?;
        let x = flat(g, x)?;
        let p = g.input(prompt.clone())?;
        let p = net.forward(g, &vars, p)?;
        let p = flat(g, p)?;
        let qv = g.input(onehot(&q, 2)?.tensor().clone())?;
        let o = attention_transfer_var(g, x, p, qv, &cfg)?;
        let l = promptseg::losses::partial_loss_var(g, o, &mask, p, &q, true)?;
        Ok(l.total)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

