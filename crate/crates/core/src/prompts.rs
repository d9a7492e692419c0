//! Residual semantic prompt pools and query–prompt matching.
//!
//! A pool holds one learnable residual token row per category. Prompts are
//! the category text embedding plus that residual, pushed through a fixed
//! projection. Matching assigns every query to its most similar prompt.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::seeding;

/// How the query–prompt similarity matrix is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// `Q·Pᵀ / (‖Q‖_F ‖P‖_F)`.
    #[default]
    Frobenius,
    /// Per-pair cosine similarity.
    RowCosine,
}

/// Deterministic stand-in for a text encoder: category names hash to seeded
/// unit vectors, and prompts are `(embed + residual) · projection`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerator {
    seed: u64,
    dim: usize,
    projection: Matrix,
}

impl PromptGenerator {
    /// `scale` multiplies the orthonormal projection, setting prompt magnitude.
    pub fn new(seed: u64, dim: usize, scale: f64) -> Self {
        let mut rng = seeding::rng(seed, "prompt-projection");
        let raw = seeding::gaussian_matrix(&mut rng, dim, dim, 1.0);
        let projection = orthonormalize_rows(&raw).scale(scale);
        Self { seed, dim, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Seeded unit vector for a category name.
    pub fn text_embed(&self, name: &str) -> Vec<f64> {
        let mut rng = seeding::rng(seeding::fnv1a(self.seed, name.as_bytes()), "text-embed");
        let v: Vec<f64> = (0..self.dim).map(|_| seeding::gaussian(&mut rng)).collect();
        let n = crate::numerics::norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn text_embed_matrix<S: AsRef<str>>(&self, names: &[S]) -> Matrix {
        let rows: Vec<Vec<f64>> = names.iter().map(|n| self.text_embed(n.as_ref())).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows).expect("uniform embedding width")
    }

    fn check(&self, names: usize, tokens: (usize, usize)) -> Result<()> {
        if tokens != (names, self.dim) {
            return Err(Error::shape("generate_prompts", (names, self.dim), tokens));
        }
        Ok(())
    }

    /// `P = (text_embed(names) + tokens) · projection`.
    pub fn generate<S: AsRef<str>>(&self, names: &[S], tokens: &Matrix) -> Result<Matrix> {
        self.check(names.len(), tokens.shape())?;
        self.text_embed_matrix(names).add(tokens)?.matmul(&self.projection)
    }

    /// Differentiable form of [`PromptGenerator::generate`] in `tokens`.
    pub fn generate_on<S: AsRef<str>>(&self, tape: &Tape, names: &[S], tokens: Var) -> Result<Var> {
        self.check(names.len(), tape.shape(tokens))?;
        let embed = tape.constant(self.text_embed_matrix(names));
        let proj = tape.constant(self.projection.clone());
        let base = tape.add(embed, tokens)?;
        tape.matmul(base, proj)
    }
}

pub fn generate_prompts<S: AsRef<str>>(generator: &PromptGenerator, names: &[S], tokens: &Matrix) -> Result<Matrix> {
    generator.generate(names, tokens)
}

/// Gram–Schmidt on the rows of a square matrix.
fn orthonormalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let mut row = out.row(i).to_vec();
        for j in 0..i {
            let prev = out.row(j);
            let proj = crate::numerics::dot(&row, prev);
            row.iter_mut().zip(prev).for_each(|(x, p)| *x -= proj * p);
        }
        let n = crate::numerics::norm(&row);
        row.iter_mut().for_each(|x| *x /= n);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// The prompts introduced at one incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub task_id: usize,
    pub category_names: Vec<String>,
    /// Learnable residual tokens, one row per category.
    pub tokens: Matrix,
    /// Cached `generate(category_names, tokens)`.
    pub prompts: Matrix,
    pub trainable: bool,
}

impl PromptPool {
    /// Pool with zero residual tokens: the prompts start at the pure text prior.
    pub fn new(task_id: usize, category_names: Vec<String>, generator: &PromptGenerator) -> Result<Self> {
        let tokens = Matrix::zeros(category_names.len(), generator.dim());
        Self::with_tokens(task_id, category_names, tokens, generator)
    }

    pub fn with_tokens(
        task_id: usize,
        category_names: Vec<String>,
        tokens: Matrix,
        generator: &PromptGenerator,
    ) -> Result<Self> {
        for (i, name) in category_names.iter().enumerate() {
            if category_names[..i].contains(name) {
                return Err(Error::Parameter(format!("duplicate category name {name:?} in pool")));
            }
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Parameter(format!("invalid category name {name:?}")));
            }
        }
        let prompts = generator.generate(&category_names, &tokens)?;
        Ok(Self {
            task_id,
            category_names,
            tokens,
            prompts,
            trainable: true,
        })
    }

    pub fn len(&self) -> usize {
        self.category_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_names.is_empty()
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    /// Replaces the tokens and regenerates prompts. Frozen pools refuse.
    pub fn set_tokens(&mut self, tokens: Matrix, generator: &PromptGenerator) -> Result<()> {
        if !self.trainable {
            return Err(Error::Contract(format!("prompt pool {} is frozen", self.task_id)));
        }
        self.prompts = generator.generate(&self.category_names, &tokens)?;
        self.tokens = tokens;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pool {}", self.task_id);
        let _ = writeln!(s, "trainable {}", self.trainable);
        let _ = writeln!(s, "categories {}", self.category_names.len());
        for name in &self.category_names {
            let _ = writeln!(s, "{name}");
        }
        s.push_str("tokens\n");
        s.push_str(&self.tokens.to_text());
        s.push_str("prompts\n");
        s.push_str(&self.prompts.to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let pool = Self::parse_lines(&mut lines)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after prompt pool".into()));
        }
        Ok(pool)
    }

    pub(crate) fn parse_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut std::iter::Peekable<I>) -> Result<Self> {
        let task_id = keyed(lines.next(), "pool")?
            .parse()
            .map_err(|_| Error::Parse("bad pool task id".into()))?;
        let trainable = match keyed(lines.next(), "trainable")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Parse(format!("bad trainable flag {other:?}"))),
        };
        let count: usize = keyed(lines.next(), "categories")?
            .parse()
            .map_err(|_| Error::Parse("bad category count".into()))?;
        let mut category_names = Vec::with_capacity(count);
        for _ in 0..count {
            let name = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated category list".into()))?;
            category_names.push(name.trim().to_string());
        }
        expect_line(lines.next(), "tokens")?;
        let (tokens, _) = Matrix::parse_lines(lines)?;
        expect_line(lines.next(), "prompts")?;
        let (prompts, _) = Matrix::parse_lines(lines)?;
        if tokens.shape() != prompts.shape() || tokens.rows() != category_names.len() {
            return Err(Error::Parse("prompt pool shapes disagree".into()));
        }
        Ok(Self {
            task_id,
            category_names,
            tokens,
            prompts,
            trainable,
        })
    }
}

fn keyed<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("expected `{key} <value>` line")))
}

fn expect_line(line: Option<&str>, want: &str) -> Result<()> {
    match line {
        Some(l) if l.trim() == want => Ok(()),
        other => Err(Error::Parse(format!("expected `{want}`, found {other:?}"))),
    }
}

/// Outcome of matching queries against a prompt matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub similarity: Matrix,
    /// Row-wise argmax of `similarity`, lowest index on ties.
    pub assignments: Vec<usize>,
    /// `1 / (‖Q‖_F ‖P‖_F)` under [`SimilarityMode::Frobenius`]; `None` for row cosine.
    pub scale_constant: Option<f64>,
}

/// Index of the largest entry, preferring the lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn similarity(q: &Matrix, p: &Matrix, mode: SimilarityMode) -> Result<(Matrix, Option<f64>)> {
    check_match_inputs(q, p)?;
    match mode {
        SimilarityMode::Frobenius => {
            let k = 1.0 / (q.frobenius_norm() * p.frobenius_norm());
            Ok((q.matmul_t(p)?.scale(k), Some(k)))
        }
        SimilarityMode::RowCosine => {
            let s = q.row_normalize()?.matmul_t(&p.row_normalize()?)?;
            Ok((s, None))
        }
    }
}

fn check_match_inputs(q: &Matrix, p: &Matrix) -> Result<()> {
    if q.cols() != p.cols() {
        return Err(Error::shape("match_queries", q.shape(), p.shape()));
    }
    if p.rows() == 0 {
        return Err(Error::DegenerateInput("empty prompt matrix".into()));
    }
    if q.frobenius_norm() < 1e-12 {
        return Err(Error::DegenerateInput(
            "query matrix has Frobenius norm below 1e-12".into(),
        ));
    }
    if p.frobenius_norm() < 1e-12 {
        return Err(Error::DegenerateInput(
            "prompt matrix has Frobenius norm below 1e-12".into(),
        ));
    }
    Ok(())
}

/// Similarity matrix and per-query argmax assignment.
pub fn match_queries(q: &Matrix, p: &Matrix, mode: SimilarityMode) -> Result<MatchResult> {
    let (similarity, scale_constant) = similarity(q, p, mode)?;
    let assignments = (0..similarity.rows()).map(|i| argmax(similarity.row(i))).collect();
    Ok(MatchResult {
        similarity,
        assignments,
        scale_constant,
    })
}

/// Differentiable similarity between query and prompt nodes.
pub fn similarity_on(tape: &Tape, q: Var, p: Var, mode: SimilarityMode) -> Result<Var> {
    check_match_inputs(&tape.value(q), &tape.value(p))?;
    match mode {
        SimilarityMode::Frobenius => {
            let qp = tape.matmul_t(q, p)?;
            let nq = tape.frobenius_norm(q);
            let np = tape.frobenius_norm(p);
            let denom = tape.mul(nq, np)?;
            let one = tape.constant(Matrix::scalar(1.0));
            let inv = tape.div(one, denom)?;
            tape.mul_scalar(qp, inv)
        }
        SimilarityMode::RowCosine => {
            let qn = tape.row_normalize(q)?;
            let pn = tape.row_normalize(p)?;
            tape.matmul_t(qn, pn)
        }
    }
}

/// Row `i` of the result is `p[assignments[i]]`.
pub fn gather_matched_prompts(m: &MatchResult, p: &Matrix) -> Result<Matrix> {
    p.select_rows(&m.assignments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_tokens_give_pure_text_prior() {
        let g = PromptGenerator::new(3, 4, 1.0);
        let n = names(&["disc", "square"]);
        let p = g.generate(&n, &Matrix::zeros(2, 4)).unwrap();
        let expected = g.text_embed_matrix(&n).matmul(g.projection()).unwrap();
        assert_eq!(p, expected);
    }

    #[test]
    fn generation_is_deterministic() {
        let n = names(&["disc", "square", "cross"]);
        let t = Matrix::filled(3, 5, 0.1);
        let a = PromptGenerator::new(11, 5, 1.0).generate(&n, &t).unwrap();
        let b = PromptGenerator::new(11, 5, 1.0).generate(&n, &t).unwrap();
        assert_eq!(a, b);
        let c = PromptGenerator::new(12, 5, 1.0).generate(&n, &t).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn token_perturbation_moves_prompts_linearly() {
        let g = PromptGenerator::new(5, 3, 1.0);
        let n = names(&["a", "b"]);
        let t = Matrix::from_rows(&[[0.1, 0.2, 0.3], [-0.5, 0.0, 0.25]]).unwrap();
        let delta = Matrix::from_rows(&[[0.5, -0.25, 0.0], [0.0, 1.0, -2.0]]).unwrap();
        let p0 = g.generate(&n, &t).unwrap();
        let p1 = g.generate(&n, &t.add(&delta).unwrap()).unwrap();
        let moved = p1.sub(&p0).unwrap();
        let expected = delta.matmul(g.projection()).unwrap();
        assert!(moved.max_abs_diff(&expected) < 1e-14);
        assert!(moved.frobenius_norm() > 0.0);
    }

    #[test]
    fn projection_is_orthonormal_times_scale() {
        let g = PromptGenerator::new(1, 6, 0.5);
        let gram = crate::numerics::gram_matrix(g.projection());
        assert!(gram.max_abs_diff(&Matrix::identity(6).scale(0.25)) < 1e-12);
    }

    #[test]
    fn name_count_mismatch_is_shape_error() {
        let g = PromptGenerator::new(1, 3, 1.0);
        let err = g.generate(&names(&["a"]), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matching_examples() {
        let q = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let m = match_queries(&q, &p, SimilarityMode::Frobenius).unwrap();
        assert_eq!(m.assignments, vec![0, 1]);
        let k = m.scale_constant.unwrap();
        assert!(m.similarity.max_abs_diff(&q.matmul_t(&p).unwrap().scale(k)) < 1e-15);

        let q = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        assert_eq!(
            match_queries(&q, &p, SimilarityMode::Frobenius).unwrap().assignments,
            vec![1]
        );

        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(
            match_queries(&q, &p, SimilarityMode::Frobenius).unwrap().assignments,
            vec![0]
        );
    }

    #[test]
    fn row_cosine_can_disagree_with_frobenius_magnitudes() {
        // Frobenius scaling keeps raw dot products; cosine normalizes prompt length away.
        let q = Matrix::from_rows(&[[1.0, 0.2]]).unwrap();
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 10.0]]).unwrap();
        assert_eq!(
            match_queries(&q, &p, SimilarityMode::Frobenius).unwrap().assignments,
            vec![1]
        );
        let cos = match_queries(&q, &p, SimilarityMode::RowCosine).unwrap();
        assert_eq!(cos.assignments, vec![0]);
        assert!(cos.scale_constant.is_none());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let q = Matrix::zeros(2, 2);
        let p = Matrix::identity(2);
        assert!(matches!(
            match_queries(&q, &p, SimilarityMode::Frobenius),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            match_queries(&p, &q, SimilarityMode::Frobenius),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn gather_examples() {
        let p = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let m = |a: Vec<usize>| MatchResult {
            similarity: Matrix::zeros(a.len(), 2),
            assignments: a,
            scale_constant: None,
        };
        assert_eq!(gather_matched_prompts(&m(vec![0, 1]), &p).unwrap(), p);
        let all0 = gather_matched_prompts(&m(vec![0, 0, 0]), &p).unwrap();
        for r in 0..3 {
            assert_eq!(all0.row(r), p.row(0));
        }
        assert!(gather_matched_prompts(&m(vec![2]), &p).is_err());
    }

    #[test]
    fn pool_text_round_trip_and_freeze() {
        let g = PromptGenerator::new(2, 3, 1.0);
        let mut pool = PromptPool::new(1, names(&["disc", "ring"]), &g).unwrap();
        pool.set_tokens(Matrix::filled(2, 3, 0.125), &g).unwrap();
        let back = PromptPool::from_text(&pool.to_text()).unwrap();
        assert_eq!(back, pool);
        pool.freeze();
        assert!(pool.set_tokens(Matrix::zeros(2, 3), &g).is_err());
        assert!(PromptPool::new(0, names(&["a", "a"]), &g).is_err());
    }
}
