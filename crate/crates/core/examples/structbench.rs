//! Emulates conv3d_core inner structure single-threaded to find overhead.
use std::time::Instant;

#[inline(always)]
fn row_taps3(dst: &mut [f32], src: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = dst.len();
    let s = &src[..n + 2];
    for i in 0..n {
        dst[i] = w2.mul_add(s[i + 2], w1.mul_add(s[i + 1], w0.mul_add(s[i], dst[i])));
    }
}

fn main() {
    let (ci, co, d, h, w) = (4usize, 4usize, 32usize, 32usize, 32usize);
    let (dp, hp, wp) = (d + 2, h + 2, w + 2);
    let xp = vec![0.3f32; ci * dp * hp * wp];
    let weights = vec![0.01f32; co * ci * 27];
    let mut out = vec![0.0f32; co * d * h * w];
    let mut acc = vec![0.0f32; co * w];
    let reps = 30;
    let t0 = Instant::now();
    for _ in 0..reps {
        for dd in 0..d {
            for hh in 0..h {
                acc.fill(0.0);
                for icc in 0..ci {
                    for kdd in 0..3 {
                        let plane = (icc * dp + dd + kdd) * hp;
                        for khh in 0..3 {
                            let src = &xp[(plane + hh + khh) * wp..][..w + 2];
                            let wofs = (kdd * 3 + khh) * 3;
                            for oc in 0..co {
                                let wrow = &weights[(oc * ci + icc) * 27 + wofs..][..3];
                                row_taps3(&mut acc[oc * w..][..w], src, wrow[0], wrow[1], wrow[2]);
                            }
                        }
                    }
                }
                for oc in 0..co {
                    out[((oc * d + dd) * h + hh) * w..][..w].copy_from_slice(&acc[oc * w..][..w]);
                }
            }
        }
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = (d * h * w * ci * co * 27 * 2 * reps) as f64;
    println!("structured single-thread: {:.1} GFLOP/s [{}]", flops / el / 1e9, out[0]);

    // same but loop order (oc outer, fused src reuse none)
    let t0 = Instant::now();
    for _ in 0..reps {
        for dd in 0..d {
            for hh in 0..h {
                acc.fill(0.0);
                for oc in 0..co {
                    let a = &mut acc[oc * w..][..w];
                    for icc in 0..ci {
                        let wbase = (oc * ci + icc) * 27;
                        for kdd in 0..3 {
                            let plane = (icc * dp + dd + kdd) * hp;
                            for khh in 0..3 {
                                let src = &xp[(plane + hh + khh) * wp..][..w + 2];
                                let wofs = wbase + (kdd * 3 + khh) * 3;
                                row_taps3(a, src, weights[wofs], weights[wofs + 1], weights[wofs + 2]);
                            }
                        }
                    }
                }
                for oc in 0..co {
                    out[((oc * d + dd) * h + hh) * w..][..w].copy_from_slice(&acc[oc * w..][..w]);
                }
            }
        }
    }
    let el = t0.elapsed().as_secs_f64();
    println!("oc-outer single-thread:  {:.1} GFLOP/s [{}]", flops / el / 1e9, out[1]);
}
