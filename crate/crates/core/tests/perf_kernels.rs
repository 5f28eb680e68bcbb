//! Raw kernel timings (run with --ignored).

use std::time::Instant;

use ffkd::kernels as k;
use ffkd::tape::Tape;

fn timeit<F: FnMut()>(label: &str, mut f: F) {
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_millis() < 300 {
        f();
        n += 1;
    }
    println!("{label}: {:?}/iter", t0.elapsed() / n);
}

#[test]
#[ignore]
fn kernel_timings() {
    let (n, ci, h, w, co) = (8usize, 24usize, 32usize, 32usize, 96usize);
    let x = vec![0.5f32; n * ci * h * w];
    let wt = vec![0.01f32; co * ci];
    timeit("pointwise 24->96 @32^2 b8 fwd", || {
        let _ = k::conv2d_forward(&x, &wt, None, n, ci, h, w, co, 1, 1, 1);
    });
    let dy = vec![0.1f32; n * co * h * w];
    timeit("pointwise bwd_x", || {
        let _ = k::conv2d_backward_x(&dy, &wt, n, ci, h, w, co, 1, 1, 1);
    });
    timeit("pointwise bwd_w", || {
        let _ = k::conv2d_backward_w(&x, &dy, n, ci, h, w, co, 1, 1, 1);
    });
    let big = vec![0.3f32; n * co * h * w];
    timeit("alloc+copy 786k", || {
        let v = big.clone();
        std::hint::black_box(v);
    });
    timeit("hswish via tape 786k", || {
        let mut t = Tape::inference();
        let id = t.leaf(big.clone(), vec![n, co, h, w]).unwrap();
        let _ = t.hard_swish(id).unwrap();
    });
    let dwk = vec![0.1f32; co * 9];
    timeit("dwconv 96ch 3x3 @32^2 fwd", || {
        let _ = k::dwconv2d_forward(&big, &dwk, n, co, h, w, 3, 3, 1);
    });
    let tower_w = vec![0.01f32; 32 * 32 * 9];
    let tx = vec![0.4f32; 8 * 32 * 16 * 16];
    timeit("tower 3x3 32->32 @16^2 fwd", || {
        let _ = k::conv2d_forward(&tx, &tower_w, None, 8, 32, 16, 16, 32, 3, 3, 1);
    });
    let tdy = vec![0.2f32; 8 * 32 * 16 * 16];
    timeit("tower 3x3 bwd_w", || {
        let _ = k::conv2d_backward_w(&tx, &tdy, 8, 32, 16, 16, 32, 3, 3, 1);
    });
    timeit("tower 3x3 bwd_x", || {
        let _ = k::conv2d_backward_x(&tdy, &tower_w, 8, 32, 16, 16, 32, 3, 3, 1);
    });
}
