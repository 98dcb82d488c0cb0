use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, OnceLock};

use super::tensor::TruncatedTensor;
use crate::error::{Error, Result};

/// Tolerance on the relative non-Lie residual accepted by [`LyndonBasis::project`].
pub const LIE_TOLERANCE: f64 = 1e-9;

fn mobius(mut n: u64) -> i64 {
    let mut result = 1i64;
    let mut p = 2u64;
    while p * p <= n {
        if n.is_multiple_of(p) {
            n /= p;
            if n.is_multiple_of(p) {
                return 0;
            }
            result = -result;
        }
        p += 1;
    }
    if n > 1 {
        result = -result;
    }
    result
}

/// Dimension of the depth-`depth` truncated log-signature of a `dim`-dimensional path,
/// β(d,N) = Σ_{k=1}^N (1/k) Σ_{i|k} μ(k/i) d^i.
pub fn beta(dim: usize, depth: usize) -> Result<u64> {
    if dim == 0 || depth == 0 {
        return Err(Error::InvalidArgument(format!(
            "beta needs d ≥ 1 and N ≥ 1, got d={dim}, N={depth}"
        )));
    }
    let overflow = || Error::Overflow { dim, depth };
    let d = i128::try_from(dim).map_err(|_| overflow())?;
    let mut total: i128 = 0;
    for k in 1..=depth as u64 {
        let mut necklace: i128 = 0;
        for i in (1..=k).filter(|i| k % i == 0) {
            let power = u32::try_from(i)
                .ok()
                .and_then(|e| d.checked_pow(e))
                .ok_or_else(overflow)?;
            let term = power.checked_mul(mobius(k / i) as i128).ok_or_else(overflow)?;
            necklace = necklace.checked_add(term).ok_or_else(overflow)?;
        }
        debug_assert_eq!(necklace % k as i128, 0);
        total = total.checked_add(necklace / k as i128).ok_or_else(overflow)?;
    }
    u64::try_from(total).map_err(|_| overflow())
}

/// Lyndon words of length 1..=depth over `0..dim`, ordered by length then lexicographically.
pub fn lyndon_words(dim: usize, depth: usize) -> Vec<Vec<usize>> {
    let mut words = Vec::new();
    if dim == 0 || depth == 0 {
        return words;
    }
    // Duval's generator enumerates Lyndon words of length ≤ depth in lexicographic order.
    let mut w: Vec<usize> = vec![0];
    loop {
        words.push(w.clone());
        let m = w.len();
        while w.len() < depth {
            let c = w[w.len() - m];
            w.push(c);
        }
        while let Some(&last) = w.last() {
            if last == dim - 1 {
                w.pop();
            } else {
                break;
            }
        }
        match w.last_mut() {
            Some(last) => *last += 1,
            None => break,
        }
    }
    words.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    words
}

fn is_lyndon(word: &[usize]) -> bool {
    (1..word.len()).all(|i| word < &word[i..])
}

/// Standard factorization w = uv with v the longest proper Lyndon suffix.
fn standard_split(word: &[usize]) -> usize {
    (1..word.len())
        .find(|&i| is_lyndon(&word[i..]))
        .expect("words of length ≥ 2 have a Lyndon suffix")
}

fn word_index(word: &[usize], dim: usize) -> usize {
    word.iter().fold(0, |acc, &i| acc * dim + i)
}

/// Sparse expansion of a Lie bracket polynomial within one tensor level.
type Sparse = Vec<(usize, f64)>;

fn bracket(a: &Sparse, a_len: usize, b: &Sparse, b_len: usize, dim: usize) -> Sparse {
    let mut acc: HashMap<usize, f64> = HashMap::new();
    let shift_b = dim.pow(b_len as u32);
    let shift_a = dim.pow(a_len as u32);
    for &(i, x) in a {
        for &(j, y) in b {
            *acc.entry(i * shift_b + j).or_default() += x * y;
            *acc.entry(j * shift_a + i).or_default() -= x * y;
        }
    }
    let mut out: Sparse = acc.into_iter().filter(|&(_, v)| v != 0.0).collect();
    out.sort_unstable_by_key(|&(i, _)| i);
    out
}

/// Lyndon basis of the free Lie algebra truncated at `depth`, with each basis
/// element's tensor expansion under standard right bracketing.
#[derive(Debug)]
pub struct LyndonBasis {
    dim: usize,
    depth: usize,
    words: Vec<Vec<usize>>,
    expansions: Vec<Sparse>,
    /// Range of `words` belonging to each level 1..=depth (index 0 unused).
    level_ranges: Vec<std::ops::Range<usize>>,
}

impl LyndonBasis {
    pub fn new(dim: usize, depth: usize) -> Result<Self> {
        beta(dim, depth)?;
        let words = lyndon_words(dim, depth);
        let mut by_word: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut expansions: Vec<Sparse> = Vec::with_capacity(words.len());
        for (idx, w) in words.iter().enumerate() {
            let expansion = if w.len() == 1 {
                vec![(w[0], 1.0)]
            } else {
                let split = standard_split(w);
                let (u, v) = w.split_at(split);
                let eu = &expansions[by_word[u]];
                let ev = &expansions[by_word[v]];
                bracket(eu, u.len(), ev, v.len(), dim)
            };
            debug_assert_eq!(
                expansion.iter().find(|(i, _)| *i == word_index(w, dim)).map(|p| p.1),
                Some(1.0)
            );
            expansions.push(expansion);
            by_word.insert(w.clone(), idx);
        }
        let mut level_ranges = vec![0..0; depth + 1];
        let mut start = 0;
        for (k, range) in level_ranges.iter_mut().enumerate().skip(1) {
            let end = start + words[start..].iter().take_while(|w| w.len() == k).count();
            *range = start..end;
            start = end;
        }
        Ok(Self {
            dim,
            depth,
            words,
            expansions,
            level_ranges,
        })
    }

    /// Shared basis for `(dim, depth)`, built once per process.
    pub fn shared(dim: usize, depth: usize) -> Result<Arc<Self>> {
        type Cache = Mutex<HashMap<(usize, usize), Arc<LyndonBasis>>>;
        static CACHE: OnceLock<Cache> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(b) = cache.lock().expect("basis cache poisoned").get(&(dim, depth)) {
            return Ok(b.clone());
        }
        let basis = Arc::new(Self::new(dim, depth)?);
        cache
            .lock()
            .expect("basis cache poisoned")
            .insert((dim, depth), basis.clone());
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[Vec<usize>] {
        &self.words
    }

    /// Bracket label of basis element `idx` with 1-based letters, e.g. `[1,[1,2]]`.
    pub fn label(&self, idx: usize) -> String {
        fn render(w: &[usize], out: &mut String) {
            if w.len() == 1 {
                let _ = write!(out, "{}", w[0] + 1);
                return;
            }
            let (u, v) = w.split_at(standard_split(w));
            out.push('[');
            render(u, out);
            out.push(',');
            render(v, out);
            out.push(']');
        }
        let mut s = String::new();
        render(&self.words[idx], &mut s);
        s
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    fn check_shape(&self, t: &TruncatedTensor) -> Result<()> {
        if t.dim() != self.dim || t.depth() != self.depth {
            return Err(Error::ShapeMismatch(format!(
                "tensor (d={}, N={}) vs basis (d={}, N={})",
                t.dim(),
                t.depth(),
                self.dim,
                self.depth
            )));
        }
        Ok(())
    }

    /// Coordinates of a Lie element in this basis.
    ///
    /// Each expansion carries its own word with coefficient 1 and otherwise only
    /// lexicographically larger words, so a forward sweep in ascending order
    /// solves the triangular system. The leftover is the non-Lie residual.
    pub fn project(&self, lie: &TruncatedTensor) -> Result<Vec<f64>> {
        self.check_shape(lie)?;
        let mut coeffs = vec![0.0; self.len()];
        let mut residual_sq = lie.scalar() * lie.scalar();
        for k in 1..=self.depth {
            let mut r = lie.level(k).to_vec();
            for idx in self.level_ranges[k].clone() {
                let c = r[word_index(&self.words[idx], self.dim)];
                coeffs[idx] = c;
                if c != 0.0 {
                    for &(pos, v) in &self.expansions[idx] {
                        r[pos] -= c * v;
                    }
                }
            }
            residual_sq += r.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = lie.norm();
        let residual = residual_sq.sqrt();
        if residual > LIE_TOLERANCE * norm {
            return Err(Error::NotLie { residual, norm });
        }
        Ok(coeffs)
    }

    /// Tensor expansion Σ c_w P(w) of Lyndon coordinates.
    pub fn expand(&self, coeffs: &[f64]) -> Result<TruncatedTensor> {
        if coeffs.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.len()
            )));
        }
        let mut t = TruncatedTensor::zeros(self.dim, self.depth);
        for (idx, &c) in coeffs.iter().enumerate() {
            let level = t.level_mut(self.words[idx].len());
            for &(pos, v) in &self.expansions[idx] {
                level[pos] += c * v;
            }
        }
        Ok(t)
    }

    /// Adjoint of [`project`](Self::project) as a linear map on tensors: maps a
    /// cotangent on the Lyndon coordinates to a cotangent on tensor coefficients
    /// (nonzero only at Lyndon-word positions).
    pub fn project_transpose(&self, cot: &[f64]) -> Result<TruncatedTensor> {
        if cot.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cotangents for a basis of size {}",
                cot.len(),
                self.len()
            )));
        }
        let mut out = TruncatedTensor::zeros(self.dim, self.depth);
        for k in 1..=self.depth {
            let range = self.level_ranges[k].clone();
            // y_w = c̄_w − Σ_{w' > w} P(w)[w'] y_{w'}, swept in descending order.
            let mut y_by_pos: HashMap<usize, f64> = HashMap::new();
            for idx in range.rev() {
                let pos = word_index(&self.words[idx], self.dim);
                let mut y = cot[idx];
                for &(p, v) in &self.expansions[idx] {
                    if p != pos {
                        if let Some(&yp) = y_by_pos.get(&p) {
                            y -= v * yp;
                        }
                    }
                }
                y_by_pos.insert(pos, y);
            }
            let level = out.level_mut(k);
            for (pos, y) in y_by_pos {
                level[pos] = y;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_values() {
        assert_eq!(beta(2, 2).unwrap(), 3);
        assert_eq!(beta(2, 3).unwrap(), 5);
        assert_eq!(beta(3, 3).unwrap(), 14);
        assert_eq!(beta(4, 3).unwrap(), 30);
        assert_eq!(beta(5, 3).unwrap(), 55);
        for d in 1..10 {
            assert_eq!(beta(d, 1).unwrap(), d as u64);
        }
    }

    #[test]
    fn beta_errors() {
        assert!(matches!(beta(0, 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(beta(1000, 40), Err(Error::Overflow { .. })));
    }

    #[test]
    fn mobius_small() {
        let expected = [1, -1, -1, 0, -1, 1, -1, 0, 0, 1, -1, 0];
        for (n, &m) in expected.iter().enumerate() {
            assert_eq!(mobius(n as u64 + 1), m, "μ({})", n + 1);
        }
    }

    #[test]
    fn lyndon_counts_match_beta() {
        for d in 1..=5 {
            for n in 1..=4 {
                assert_eq!(lyndon_words(d, n).len() as u64, beta(d, n).unwrap(), "d={d} N={n}");
            }
        }
    }

    #[test]
    fn lyndon_order_and_labels() {
        let b = LyndonBasis::new(2, 3).unwrap();
        assert_eq!(b.words(), &[vec![0], vec![1], vec![0, 1], vec![0, 0, 1], vec![0, 1, 1]]);
        assert_eq!(b.labels(), vec!["1", "2", "[1,2]", "[1,[1,2]]", "[[1,2],2]"]);
    }

    #[test]
    fn lyndon_predicate() {
        assert!(is_lyndon(&[0, 1]));
        assert!(is_lyndon(&[0, 0, 1]));
        assert!(is_lyndon(&[0, 1, 1]));
        assert!(!is_lyndon(&[1, 0]));
        assert!(!is_lyndon(&[0, 1, 0, 1]));
        assert!(!is_lyndon(&[0, 0]));
    }

    #[test]
    fn bracket_expansion_depth_three() {
        let b = LyndonBasis::new(2, 3).unwrap();
        // [1,[1,2]] = 112 − 2·121 + 211
        let t = b.expand(&[0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let l3 = t.level(3);
        assert_eq!(l3[word_index(&[0, 0, 1], 2)], 1.0);
        assert_eq!(l3[word_index(&[0, 1, 0], 2)], -2.0);
        assert_eq!(l3[word_index(&[1, 0, 0], 2)], 1.0);
        assert_eq!(l3.iter().filter(|x| **x != 0.0).count(), 3);
    }

    #[test]
    fn project_expand_round_trip() {
        let b = LyndonBasis::new(3, 4).unwrap();
        let coeffs: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = b.expand(&coeffs).unwrap();
        let back = b.project(&t).unwrap();
        for (a, c) in back.iter().zip(&coeffs) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn project_rejects_non_lie() {
        let b = LyndonBasis::new(2, 2).unwrap();
        let mut t = TruncatedTensor::zeros(2, 2);
        t.level_mut(2)[0] = 1.0; // e1⊗e1 is symmetric, not a Lie element
        assert!(matches!(b.project(&t), Err(Error::NotLie { .. })));
    }

    #[test]
    fn project_transpose_is_adjoint() {
        let b = LyndonBasis::new(3, 3).unwrap();
        let coeffs: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 1.3).cos()).collect();
        let lie = b.expand(&coeffs).unwrap();
        let cot: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.7 + 0.2).sin()).collect();
        let lhs: f64 = b.project(&lie).unwrap().iter().zip(&cot).map(|(a, c)| a * c).sum();
        let tt = b.project_transpose(&cot).unwrap();
        let rhs: f64 = lie.flat().iter().zip(tt.flat()).map(|(a, c)| a * c).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
