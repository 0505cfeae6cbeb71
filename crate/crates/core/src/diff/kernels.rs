//! Hot loops compiled twice, for the baseline target and with AVX2 enabled,
//! and picked at run time. Neither path uses FMA and both run the same
//! operations per element in the same order, so their results are
//! bit-identical.

macro_rules! wide_or_narrow {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                fn wide($($arg: $ty),*) $(-> $ret)? $body
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU reports AVX2.
                    return unsafe { wide($($arg),*) };
                }
            }
            fn narrow($($arg: $ty),*) $(-> $ret)? $body
            narrow($($arg),*)
        }
    };
}
pub(crate) use wide_or_narrow;

const W: usize = 8;

wide_or_narrow! {
    /// `out += a·b` for row-major `a: [m, k]`, `b: [k, n]`; every output
    /// element accumulates its `k` products in index order.
    pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
        let nw = n - n % W;
        let mut i = 0;
        while i < m {
            let pair = i + 1 < m;
            let (r0, rest) = out[i * n..].split_at_mut(n);
            let a0 = &a[i * k..(i + 1) * k];
            let (r1, a1) = if pair {
                (&mut rest[..n], &a[(i + 1) * k..(i + 2) * k])
            } else {
                (&mut [][..], a0)
            };
            for j in (0..nw).step_by(W) {
                let mut c0: [f64; W] = r0[j..j + W].try_into().expect("block");
                let mut c1 = [0.0; W];
                if pair {
                    c1.copy_from_slice(&r1[j..j + W]);
                }
                for p in 0..k {
                    let bp: &[f64; W] = b[p * n + j..p * n + j + W].try_into().expect("block");
                    let (x0, x1) = (a0[p], a1[p]);
                    for l in 0..W {
                        c0[l] += x0 * bp[l];
                        c1[l] += x1 * bp[l];
                    }
                }
                r0[j..j + W].copy_from_slice(&c0);
                if pair {
                    r1[j..j + W].copy_from_slice(&c1);
                }
            }
            for j in nw..n {
                let mut c0 = r0[j];
                for p in 0..k {
                    c0 += a0[p] * b[p * n + j];
                }
                r0[j] = c0;
                if pair {
                    let mut c1 = r1[j];
                    for p in 0..k {
                        c1 += a1[p] * b[p * n + j];
                    }
                    r1[j] = c1;
                }
            }
            i += if pair { 2 } else { 1 };
        }
    }
}
