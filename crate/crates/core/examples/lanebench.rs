//! Single-thread inner-loop ceiling probe.
use std::time::Instant;

#[inline(never)]
fn taps_plain(dst: &mut [f32], src: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = dst.len();
    let s = &src[..n + 2];
    for i in 0..n {
        dst[i] += w0 * s[i] + w1 * s[i + 1] + w2 * s[i + 2];
    }
}

#[inline(never)]
fn taps_fma(dst: &mut [f32], src: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = dst.len();
    let s = &src[..n + 2];
    for i in 0..n {
        dst[i] = w2.mul_add(s[i + 2], w1.mul_add(s[i + 1], w0.mul_add(s[i], dst[i])));
    }
}

fn run(name: &str, n: usize, f: impl Fn(&mut [f32], &[f32], f32, f32, f32)) {
    let mut dst = vec![0.1f32; n];
    let src = vec![0.2f32; n + 2];
    let reps = 200_000_000 / n;
    let t0 = Instant::now();
    for r in 0..reps {
        f(&mut dst, &src, 0.3, 0.4, (r as f32) * 1e-9);
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = (n * 6 * reps) as f64;
    println!("{name} n={n:5}: {:.1} GFLOP/s [{}]", flops / el / 1e9, dst[0]);
}

fn main() {
    for n in [32usize, 64, 96, 1024, 65536] {
        run("plain", n, taps_plain);
        run("fma  ", n, taps_fma);
    }
}
