//! Exact exhaustive late-interaction index and its on-disk format.
//!
//! File layout, all integers little-endian `u32`:
//!
//! ```text
//! "RETIDX1" | late_width | tokens | count
//! count × ( id_len | id bytes | has_image u8 | tokens×late_width f64 LE | text_len | text bytes )
//! ```

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scoring::{maxsim_score, Side, TokenMatrix};
use crate::tensor::Tensor;

pub const INDEX_MAGIC: &[u8; 7] = b"RETIDX1";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedDoc {
    pub id: String,
    pub tokens: TokenMatrix,
    pub text: String,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    tokens: usize,
    late_width: usize,
    docs: Vec<IndexedDoc>,
    by_id: HashMap<String, usize>,
}

impl RetrievalIndex {
    pub fn new(tokens: usize, late_width: usize) -> Self {
        Self {
            tokens,
            late_width,
            docs: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn late_width(&self) -> usize {
        self.late_width
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn docs(&self) -> &[IndexedDoc] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&IndexedDoc> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn add(
        &mut self,
        doc_id: impl Into<String>,
        tokens: TokenMatrix,
        text: impl Into<String>,
        has_image: bool,
    ) -> Result<()> {
        let doc_id = doc_id.into();
        if self.by_id.contains_key(&doc_id) {
            return Err(Error::DuplicateId(doc_id));
        }
        if tokens.num_tokens() != self.tokens || tokens.width() != self.late_width {
            return Err(Error::Shape {
                op: "index_add",
                left: vec![self.tokens, self.late_width],
                right: tokens.tokens().shape().to_vec(),
            });
        }
        self.by_id.insert(doc_id.clone(), self.docs.len());
        self.docs.push(IndexedDoc {
            id: doc_id,
            tokens,
            text: text.into(),
            has_image,
        });
        Ok(())
    }

    /// Scores every document and returns the best `top_k`, highest first.
    /// Equal scores keep insertion order.
    pub fn search(&self, query: &TokenMatrix, top_k: usize) -> Result<Vec<SearchHit>> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.docs.is_empty() {
            return Ok(Vec::new());
        }
        if query.width() != self.late_width {
            return Err(Error::Shape {
                op: "search",
                left: query.tokens().shape().to_vec(),
                right: vec![self.tokens, self.late_width],
            });
        }
        let scores: Vec<f64> = self
            .docs
            .par_iter()
            .map(|d| maxsim_score(query, &d.tokens))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(order
            .into_iter()
            .take(top_k)
            .map(|i| SearchHit {
                doc_id: self.docs[i].id.clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut out, self.late_width);
        put_u32(&mut out, self.tokens);
        put_u32(&mut out, self.docs.len());
        for d in &self.docs {
            put_u32(&mut out, d.id.len());
            out.extend_from_slice(d.id.as_bytes());
            out.push(u8::from(d.has_image));
            for v in d.tokens.tokens().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, d.text.len());
            out.extend_from_slice(d.text.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(Error::BadMagic {
                expected: "RETIDX1",
            });
        }
        let late_width = r.u32()?;
        let tokens = r.u32()?;
        let count = r.u32()?;
        if late_width == 0 || tokens == 0 {
            return Err(Error::Format("index header has a zero dimension".into()));
        }
        let mut index = Self::new(tokens, late_width);
        for _ in 0..count {
            let id_len = r.u32()?;
            let id = r.string(id_len)?;
            let has_image = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("has_image byte {b} is not 0 or 1"))),
            };
            let n = tokens * late_width;
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let text_len = r.u32()?;
            let text = r.string(text_len)?;
            let t = TokenMatrix::new(Side::Document, id.clone(), Tensor::new(vec![tokens, late_width], data)?);
            index.add(id, t, text, has_image)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                expected: r.pos,
                actual: bytes.len(),
            });
        }
        Ok(index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::SizeMismatch {
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
            }),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }
}
