use auxq::layers::Mode;
use auxq::net::{InputShape, Network, NetworkSpec};
use auxq::quant::{self, PrecisionPolicy};
use auxq::tensor::Tensor;
use std::time::Instant;

fn main() {
    let hw: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(28);
    let spec = NetworkSpec::preset(
        "plain4",
        InputShape { channels: 1, height: hw, width: hw },
        10,
        PrecisionPolicy::uniform(2),
    )
    .unwrap();
    let mut net = Network::<f32>::build(&spec, 0).unwrap();
    let n = 32;
    let x = Tensor::<f32>::new(&[n, 1, hw, hw], (0..n * hw * hw).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect())
        .unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let t = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let mut g = quant::ste_graph();
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, xv, Mode::Train).unwrap();
        let l = g.softmax_cross_entropy(out.logits, &labels).unwrap();
        let _ = g.backward(l).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / (iters * n) as f64;
    println!("{hw}x{hw}: {:.3} ms/sample train", per * 1e3);
}
