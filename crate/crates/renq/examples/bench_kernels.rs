// quick kernel throughput probe
use renq::tensor::*;
use std::time::Instant;

fn main() {
    let b = 160; let i = 144; let o = 64;
    let x: Vec<f64> = (0..b*i).map(|v| (v as f64).sin()).collect();
    let wt: Vec<f64> = (0..i*o).map(|v| (v as f64).cos()).collect();
    let bias = vec![0.1; o];
    let mut out = vec![0.0; b*o];
    let t = Instant::now();
    let reps = 2000;
    for _ in 0..reps { dense_forward_t(&mut out, &x, &wt, &bias, b, i, o); }
    let el = t.elapsed().as_secs_f64();
    let gf = (reps * b * i * o * 2) as f64 / el / 1e9;
    println!("dense_forward_t {b}x{i}x{o}: {gf:.2} GFLOP/s  (sink {})", out[0]);

    // batched conv: c_in 4, 16x16, oc 8, k3 s2, batch 160
    let (c_in, h, w, oc, stride, batch) = (4usize, 16usize, 16usize, 8usize, 2usize, 160usize);
    let x: Vec<f64> = (0..c_in*h*w*batch).map(|v| (v as f64).sin().abs()).collect();
    let wts: Vec<f64> = (0..oc*c_in*9).map(|v| (v as f64).cos()).collect();
    let bias = vec![0.0; oc];
    let oh = (h-3)/stride + 1; let ow = oh;
    let mut out = vec![0.0; oc*oh*ow*batch];
    let t = Instant::now();
    let reps = 2000;
    for _ in 0..reps {
        conv_valid_direct_batched(&x, c_in, h, w, &wts, &bias, oc, 3, 3, stride, batch, &mut out);
    }
    let el = t.elapsed().as_secs_f64();
    let macs = oc*c_in*9*oh*ow*batch;
    println!("conv_batched: {:.2} GFLOP/s (sink {})", (reps*macs*2) as f64/el/1e9, out[0]);

    // scalar conv per item
    let xi: Vec<f64> = (0..c_in*h*w).map(|v| (v as f64).sin().abs()).collect();
    let mut outi = vec![0.0; oc*oh*ow];
    let t = Instant::now();
    for _ in 0..reps*batch {
        conv_valid_direct(&xi, c_in, h, w, &wts, &bias, oc, 3, 3, stride, &mut outi);
    }
    let el = t.elapsed().as_secs_f64();
    let macs = oc*c_in*9*oh*ow;
    println!("conv_scalar: {:.2} GFLOP/s (sink {})", (reps*batch*macs*2) as f64/el/1e9, outi[0]);
}
