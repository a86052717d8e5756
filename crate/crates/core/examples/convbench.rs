//! Rough conv3d throughput probe used to size CPU training profiles.
use std::time::Instant;
use vessel3d_core::autodiff::kernels::{conv3d_bwd, conv3d_fwd};
use vessel3d_core::tensor::Tensor;

fn bench(ci: usize, co: usize, d: usize) {
    let x = Tensor::<f32>::from_fn(&[ci, d, d, d], |i| (i % 17) as f32 * 0.01);
    let w = Tensor::<f32>::from_fn(&[co, ci, 3, 3, 3], |i| (i % 13) as f32 * 0.01 - 0.05);
    let b = Tensor::<f32>::zeros(&[co]);
    let reps = (2_000_000_000usize / (d * d * d * ci * co * 27 * 2)).clamp(2, 200);
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y = conv3d_fwd(&x, &w, &b);
        sink += y.data()[0];
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = (d * d * d * ci * co * 27 * 2) as f64 * reps as f64;
    println!(
        "fwd  ci={ci:3} co={co:3} d={d:2}: {:.1} GFLOP/s ({} reps) [{sink}]",
        flops / el / 1e9,
        reps
    );
    let g = Tensor::<f32>::from_fn(&[co, d, d, d], |i| (i % 11) as f32 * 0.01);
    let t0 = Instant::now();
    let reps2 = (reps / 3).max(1);
    for _ in 0..reps2 {
        let (gx, _, _) = conv3d_bwd(&x, &w, &g);
        sink += gx.data()[0];
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = (d * d * d * ci * co * 27 * 2 * 3) as f64 * reps2 as f64;
    println!(
        "bwd  ci={ci:3} co={co:3} d={d:2}: {:.1} GFLOP/s ({} reps) [{sink}]",
        flops / el / 1e9,
        reps2
    );
}

fn main() {
    vessel3d_core::sys::tune_allocator();
    bench(4, 4, 32);
    bench(8, 8, 32);
    bench(16, 16, 16);
    bench(4, 4, 64);
    bench(8, 8, 64);
    bench(1, 4, 32);
}
