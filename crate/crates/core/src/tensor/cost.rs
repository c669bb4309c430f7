/// Multiply-accumulate counts of one convolution layer evaluated at every
/// output position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvCost {
    /// `h·w·k²·d_i·d_j`
    pub standard: u64,
    /// `h·w·d_i·(k² + d_j)`, depthwise then pointwise.
    pub separable: u64,
    /// `k²·d_j / (k² + d_j)`, so that `ratio · separable == standard`.
    pub ratio: f64,
}

impl ConvCost {
    /// The ratio as an exact fraction `(numerator, denominator)`.
    pub fn ratio_fraction(k: u64, d_j: u64) -> (u64, u64) {
        (k * k * d_j, k * k + d_j)
    }
}

/// Analytic cost of a `k×k` convolution from `d_i` to `d_j` channels over an
/// `h×w` output grid. All arguments must be positive.
pub fn conv_cost(h: u64, w: u64, k: u64, d_i: u64, d_j: u64) -> ConvCost {
    debug_assert!(h > 0 && w > 0 && k > 0 && d_i > 0 && d_j > 0);
    let (num, den) = ConvCost::ratio_fraction(k, d_j);
    ConvCost {
        standard: h * w * k * k * d_i * d_j,
        separable: h * w * d_i * (k * k + d_j),
        ratio: num as f64 / den as f64,
    }
}
