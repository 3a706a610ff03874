//! Token, head and per-head cache types.
//!
//! A [`HeadCache`] keeps its tokens in three segments, oldest first:
//!
//! ```text
//! [ conditional | historical | recent (≤ w) ]
//! ```
//!
//! New tokens enter `recent`; once the recent window is full its oldest token
//! moves to the tail of `historical`. Only the historical segment is ever
//! offered to an eviction policy.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Token grid of the generated image plus the conditional prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub conditional_len: usize,
    pub head_dim: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, conditional_len: usize, head_dim: usize) -> Result<Self> {
        let g = Self { height, width, conditional_len, head_dim };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("grid height and width must be positive".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::InvalidConfig("head_dim must be positive".into()));
        }
        Ok(())
    }

    /// Number of visual tokens `N = h × w`.
    #[inline]
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Total stream length: conditional prefix plus all visual tokens.
    #[inline]
    pub fn stream_len(&self) -> usize {
        self.conditional_len + self.tokens()
    }

    /// Row/column of a visual token, `None` for conditional positions.
    pub fn coords(&self, position: usize) -> Option<(usize, usize)> {
        let idx = position.checked_sub(self.conditional_len)?;
        Some((idx / self.width, idx % self.width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadAddr {
    pub layer: usize,
    pub head: usize,
}

impl HeadAddr {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Number of layers and heads per layer. Heads are enumerated layer-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_layers: usize,
    pub num_heads: usize,
}

impl HeadLayout {
    pub const fn new(num_layers: usize, num_heads: usize) -> Self {
        Self { num_layers, num_heads }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.num_layers * self.num_heads
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, addr: HeadAddr) -> usize {
        addr.layer * self.num_heads + addr.head
    }

    #[inline]
    pub fn addr(&self, index: usize) -> HeadAddr {
        HeadAddr::new(index / self.num_heads, index % self.num_heads)
    }

    pub fn addrs(&self) -> impl ExactSizeIterator<Item = HeadAddr> + '_ {
        (0..self.len()).map(move |i| self.addr(i))
    }

    pub fn contains(&self, addr: HeadAddr) -> bool {
        addr.layer < self.num_layers && addr.head < self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

impl TokenRecord {
    pub fn new(position: usize, key: Vec<f64>, value: Vec<f64>) -> Self {
        Self { position, key, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeadClass {
    Local,
    Global,
    #[default]
    Undecided,
}

impl HeadClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadClass::Local => "local",
            HeadClass::Global => "global",
            HeadClass::Undecided => "undecided",
        }
    }
}

impl fmt::Display for HeadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Materialised keys/values of a cache in segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheView {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl CacheView {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Segmented KV store of a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    head_dim: usize,
    window: usize,
    query_capacity: usize,
    conditional: Vec<TokenRecord>,
    historical: Vec<TokenRecord>,
    recent: VecDeque<TokenRecord>,
    query_history: VecDeque<Vec<f64>>,
}

impl HeadCache {
    /// `window` is the recent-window length `w`, `query_capacity` the number
    /// of past queries kept for eviction scoring.
    pub fn new(head_dim: usize, window: usize, query_capacity: usize) -> Result<Self> {
        if head_dim == 0 || window == 0 || query_capacity == 0 {
            return Err(Error::InvalidConfig(
                "head_dim, window and query capacity must be positive".into(),
            ));
        }
        Ok(Self {
            head_dim,
            window,
            query_capacity,
            conditional: Vec::new(),
            historical: Vec::new(),
            recent: VecDeque::with_capacity(window + 1),
            query_history: VecDeque::with_capacity(query_capacity + 1),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn last_position(&self) -> Option<usize> {
        self.recent
            .back()
            .or_else(|| self.historical.last())
            .or_else(|| self.conditional.last())
            .map(|r| r.position)
    }

    fn check_record(&self, rec: &TokenRecord) -> Result<()> {
        if rec.key.len() != self.head_dim {
            return Err(Error::DimensionMismatch { expected: self.head_dim, found: rec.key.len() });
        }
        if rec.value.len() != self.head_dim {
            return Err(Error::DimensionMismatch { expected: self.head_dim, found: rec.value.len() });
        }
        if let Some(last) = self.last_position() {
            if rec.position <= last {
                return Err(Error::NonMonotonePosition { position: rec.position, last });
            }
        }
        Ok(())
    }

    /// Adds a conditional (prompt) token. Only allowed before any generated
    /// token has been appended; the segment is immutable afterwards.
    pub fn push_conditional(&mut self, rec: TokenRecord) -> Result<()> {
        if !self.historical.is_empty() || !self.recent.is_empty() {
            return Err(Error::Phase("conditional tokens must precede generated tokens"));
        }
        self.check_record(&rec)?;
        self.conditional.push(rec);
        Ok(())
    }

    /// Appends a generated token to the recent window, spilling the oldest
    /// recent token into the historical segment when the window overflows.
    pub fn append_token(&mut self, rec: TokenRecord) -> Result<()> {
        self.check_record(&rec)?;
        self.recent.push_back(rec);
        if self.recent.len() > self.window {
            let oldest = self.recent.pop_front().expect("window overflowed");
            self.historical.push(oldest);
        }
        Ok(())
    }

    pub fn push_query(&mut self, q: Vec<f64>) -> Result<()> {
        if q.len() != self.head_dim {
            return Err(Error::DimensionMismatch { expected: self.head_dim, found: q.len() });
        }
        self.query_history.push_back(q);
        if self.query_history.len() > self.query_capacity {
            self.query_history.pop_front();
        }
        Ok(())
    }

    pub fn conditional(&self) -> &[TokenRecord] {
        &self.conditional
    }

    pub fn historical(&self) -> &[TokenRecord] {
        &self.historical
    }

    pub fn recent(&self) -> impl ExactSizeIterator<Item = &TokenRecord> + '_ {
        self.recent.iter()
    }

    pub fn recent_len(&self) -> usize {
        self.recent.len()
    }

    pub fn historical_len(&self) -> usize {
        self.historical.len()
    }

    pub fn len(&self) -> usize {
        self.conditional.len() + self.historical.len() + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Past queries, oldest first.
    pub fn query_history(&self) -> impl ExactSizeIterator<Item = &Vec<f64>> + '_ {
        self.query_history.iter()
    }

    pub fn latest_query(&self) -> Option<&[f64]> {
        self.query_history.back().map(Vec::as_slice)
    }

    pub fn query_matrix(&self) -> Matrix {
        let mut m = Matrix::with_cols(self.head_dim);
        for q in &self.query_history {
            m.push_row(q).expect("query width checked on push");
        }
        m
    }

    pub fn records(&self) -> impl Iterator<Item = &TokenRecord> + '_ {
        self.conditional.iter().chain(self.historical.iter()).chain(self.recent.iter())
    }

    pub fn positions(&self) -> Vec<usize> {
        self.records().map(|r| r.position).collect()
    }

    pub fn historical_positions(&self) -> Vec<usize> {
        self.historical.iter().map(|r| r.position).collect()
    }

    pub fn historical_keys(&self) -> Matrix {
        let mut m = Matrix::with_cols(self.head_dim);
        for r in &self.historical {
            m.push_row(&r.key).expect("key width checked on append");
        }
        m
    }

    /// Rows ordered conditional → historical → recent.
    pub fn view(&self) -> CacheView {
        let mut keys = Matrix::with_cols(self.head_dim);
        let mut values = Matrix::with_cols(self.head_dim);
        let mut positions = Vec::with_capacity(self.len());
        for r in self.records() {
            keys.push_row(&r.key).expect("key width checked on append");
            values.push_row(&r.value).expect("value width checked on append");
            positions.push(r.position);
        }
        CacheView { keys, values, positions }
    }

    /// Drops the historical tokens at the given strictly increasing indices.
    pub fn evict_historical(&mut self, indices: &[usize]) -> Result<()> {
        let t = self.historical.len();
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= t || prev.is_some_and(|p| i <= p) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "eviction indices must be strictly increasing and below {t}"
                )));
            }
            prev = Some(i);
        }
        let mut next = indices.iter().peekable();
        let mut idx = 0usize;
        self.historical.retain(|_| {
            let drop = next.peek().is_some_and(|&&e| e == idx);
            if drop {
                next.next();
            }
            idx += 1;
            !drop
        });
        Ok(())
    }

    /// Sliding-window limit: the whole historical segment is discarded.
    pub fn clear_historical(&mut self) {
        self.historical.clear();
    }
}
