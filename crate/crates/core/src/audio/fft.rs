//! Mixed-radix complex FFT for the short, fixed frame sizes used by the
//! frontend (400 = 2^4 * 5^2).

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    #[inline]
    fn mul(self, o: Complex) -> Complex {
        Complex { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }

    #[inline]
    fn add(self, o: Complex) -> Complex {
        Complex { re: self.re + o.re, im: self.im + o.im }
    }

    pub fn norm(self) -> f64 {
        libm::hypot(self.re, self.im)
    }
}

#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    factors: Vec<usize>,
    twiddles: Vec<Complex>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "fft size must be positive");
        let mut factors = Vec::new();
        let mut m = n;
        for p in [4, 2, 3, 5] {
            while m % p == 0 {
                factors.push(p);
                m /= p;
            }
        }
        let mut p = 7;
        while m > 1 {
            while m % p == 0 {
                factors.push(p);
                m /= p;
            }
            p += 2;
        }
        if factors.is_empty() {
            factors.push(1);
        }
        let twiddles = (0..n)
            .map(|k| {
                let a = -core::f64::consts::TAU * k as f64 / n as f64;
                Complex { re: libm::cos(a), im: libm::sin(a) }
            })
            .collect();
        Self { n, factors, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform of a real signal; returns the full complex spectrum.
    pub fn forward_real(&self, input: &[f64]) -> Vec<Complex> {
        assert_eq!(input.len(), self.n);
        let x: Vec<Complex> = input.iter().map(|&re| Complex { re, im: 0.0 }).collect();
        let mut out = vec![Complex::default(); self.n];
        let mut scratch = Vec::new();
        self.work(&mut out, &x, 0, 1, &self.factors, &mut scratch);
        out
    }

    fn work(
        &self,
        out: &mut [Complex],
        x: &[Complex],
        offset: usize,
        stride: usize,
        factors: &[usize],
        scratch: &mut Vec<Complex>,
    ) {
        let p = factors[0];
        let m = out.len() / p;
        if m == 1 {
            for q in 0..p {
                out[q] = x[offset + q * stride];
            }
        } else {
            for q in 0..p {
                self.work(&mut out[q * m..(q + 1) * m], x, offset + q * stride, stride * p, &factors[1..], scratch);
            }
        }
        // radix-p butterflies combining p interleaved sub-transforms of length m
        scratch.resize(p, Complex::default());
        let n = self.n;
        for u in 0..m {
            for q in 0..p {
                scratch[q] = out[u + q * m];
            }
            for q1 in 0..p {
                let k = u + q1 * m;
                let mut acc = Complex::default();
                for (q, &s) in scratch.iter().enumerate() {
                    let tw = self.twiddles[(q * k * stride) % n];
                    acc = acc.add(s.mul(tw));
                }
                out[k] = acc;
            }
        }
    }
}
