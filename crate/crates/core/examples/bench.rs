use std::collections::HashSet;
use std::time::Instant;
use tadsr_core::autodiff::Graph;
use tadsr_core::nets::*;
use tadsr_core::rng::Rng;
use tadsr_core::Tensor;

fn main() {
    let arch = Arch::default();
    let mut store = init_params(&arch, 1).unwrap();
    init_adapters(&mut store, "teacher.", "stu.adapt.", 2).unwrap();
    let x = Tensor::randn(&[3, 48, 48], 0.3, &Rng::new(3)).clamp01();
    let z = Tensor::randn(&[4, 12, 12], 1.0, &Rng::new(4));
    let enc_names: HashSet<String> = store.names_with_prefix("ae.enc.").into_iter().collect();
    let unet_names: HashSet<String> = store.names_with_prefix("teacher.").into_iter().collect();

    let time_it = |label: &str, f: &mut dyn FnMut()| {
        let n = 20;
        let t0 = Instant::now();
        for _ in 0..n { f(); }
        println!("{label}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
    };

    time_it("tae fwd (frozen)", &mut || {
        let mut g = Graph::new();
        let mut b = Bind::frozen(&store);
        let xv = g.leaf(&x, false);
        tae_forward_g(&mut g, &mut b, &arch, xv, Some(300)).unwrap();
    });
    time_it("tae fwd+bwd", &mut || {
        let mut g = Graph::new();
        let mut b = Bind::trainable(&store, &enc_names);
        let xv = g.leaf(&x, false);
        let zv = tae_forward_g(&mut g, &mut b, &arch, xv, Some(300)).unwrap();
        let l = g.sum_all(zv);
        g.backward(l);
    });
    time_it("unet fwd (frozen)", &mut || {
        let mut g = Graph::new();
        let mut b = Bind::frozen(&store);
        let zv = g.leaf(&z, false);
        unet_forward_g(&mut g, &mut b, &arch, "teacher.", None, zv, 300).unwrap();
    });
    time_it("unet fwd+bwd", &mut || {
        let mut g = Graph::new();
        let mut b = Bind::trainable(&store, &unet_names);
        let zv = g.leaf(&z, false);
        let ov = unet_forward_g(&mut g, &mut b, &arch, "teacher.", None, zv, 300).unwrap();
        let l = g.sum_all(ov);
        g.backward(l);
    });
    time_it("decoder fwd+bwd", &mut || {
        let mut g = Graph::new();
        let mut b = Bind::trainable(&store, &enc_names);
        let zv = g.leaf(&z, false);
        let ov = decoder_forward_g(&mut g, &mut b, &arch, zv).unwrap();
        let l = g.sum_all(ov);
        g.backward(l);
    });
}
