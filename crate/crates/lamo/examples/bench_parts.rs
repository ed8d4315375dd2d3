use lamo::math::{dot, Mat};
use std::time::Instant;

fn main() {
    // tanh cost: 820K calls as in one forward
    let xs: Vec<f32> = (0..820_000).map(|i| (i as f32 * 0.001) % 4.0 - 2.0).collect();
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &x in &xs { acc += x.tanh(); }
    println!("820K tanh: {:.1} ms (acc {acc:.1})", t0.elapsed().as_secs_f64() * 1000.0);

    // attention-ish: scores for T=400, 4 heads, hd=32
    let t_len = 400usize;
    let hd = 32usize;
    let q = Mat::<f32>::from_rows(t_len, 128, (0..t_len*128).map(|i| (i % 13) as f32 * 0.01).collect());
    let k = q.clone();
    let t0 = Instant::now();
    let mut total = 0.0f32;
    for _rep in 0..4 { // 4 layers
        for h in 0..4 {
            let off = h * hd;
            for t in 0..t_len {
                let qr = &q.row(t)[off..off + hd];
                for u in 0..=t {
                    total += dot(qr, &k.row(u)[off..off + hd]);
                }
            }
        }
    }
    println!("scores loops (4 layers x 4 heads): {:.1} ms (total {total:.1})", t0.elapsed().as_secs_f64() * 1000.0);

    // alloc cost: Mat::zeros(400,400) x 16 + misc
    let t0 = Instant::now();
    let mut keep = 0usize;
    for _ in 0..16 { let m = Mat::<f32>::zeros(400, 400); keep += m.data.len(); }
    println!("16x zeros(400x400): {:.1} ms ({keep})", t0.elapsed().as_secs_f64() * 1000.0);

    // exp cost in softmax: ~320K + logits lse 400x259
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &x in xs.iter().take(430_000) { acc += x.exp(); }
    println!("430K exp: {:.1} ms ({acc:.0})", t0.elapsed().as_secs_f64() * 1000.0);
}
