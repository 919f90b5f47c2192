//! Sobol low-discrepancy sequence, Gray-code order, up to 8 dimensions.
//!
//! Direction numbers follow the Joe-Kuo tables; point 0 is the origin, as
//! produced by the reference generators. Good for the design sizes used
//! here (initial BO designs, open-loop excitation sequences).

const MAX_DIM: usize = 8;
const BITS: usize = 32;

/// (degree s, polynomial coefficients a, initial direction numbers m_k)
/// for dimensions 2..=8; dimension 1 is the van der Corput sequence.
const JOE_KUO: [(u32, u32, &[u32]); 7] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
];

/// Direction numbers v_k (scaled by 2^32) for one dimension.
fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1 << (31 - k);
        }
        return v;
    }
    let (s, a, m_init) = JOE_KUO[dim - 1];
    let s = s as usize;
    let mut m = [0u64; BITS];
    for k in 0..BITS {
        if k < s {
            m[k] = u64::from(m_init[k]);
        } else {
            let mut mk = m[k - s] ^ (m[k - s] << s);
            for i in 1..s {
                let ai = (a >> (s - 1 - i)) & 1;
                if ai == 1 {
                    mk ^= m[k - i] << i;
                }
            }
            m[k] = mk;
        }
        v[k] = (m[k] << (31 - k)) as u32;
    }
    v
}

/// Sobol sequence over the unit hypercube.
pub struct SobolSequence {
    dims: usize,
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSequence {
    /// A fresh sequence of dimension `dims` (1..=8).
    pub fn new(dims: usize) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&dims),
            "sobol dimension must be in 1..={MAX_DIM}"
        );
        SobolSequence {
            dims,
            directions: (0..dims).map(direction_numbers).collect(),
            state: vec![0; dims],
            index: 0,
        }
    }

    /// Next point. Point 0 is the origin.
    pub fn next_point(&mut self) -> Vec<f64> {
        let out: Vec<f64> = self
            .state
            .iter()
            .map(|&x| f64::from(x) / (u32::MAX as f64 + 1.0))
            .collect();
        let c = self.index.trailing_ones() as usize;
        for d in 0..self.dims {
            self.state[d] ^= self.directions[d][c];
        }
        self.index += 1;
        out
    }
}

/// First `n` points of the `dims`-dimensional sequence, row per point.
pub fn sobol_design(n: usize, dims: usize) -> Vec<Vec<f64>> {
    let mut seq = SobolSequence::new(dims);
    (0..n).map(|_| seq.next_point()).collect()
}
