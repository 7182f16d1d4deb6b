//! The final token sequence: memory tokens, one separator row, then pooled
//! tokens of the selected frames.

use std::fs;
use std::path::Path;

use crate::dfs::SelectionResult;
use crate::error::{Error, Result};
use crate::format::{checked_product, Reader, Writer};
use crate::memory::MemoryBank;
use crate::tensor::Matrix;

pub const LLM_INPUT_MAGIC: &[u8; 4] = b"RWLI";

/// Row layout `[memory | separator | selected]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LLMInputSequence {
    rows: Matrix,
    memory_rows: usize,
    selected_rows: usize,
}

impl LLMInputSequence {
    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn memory_rows(&self) -> usize {
        self.memory_rows
    }

    pub fn selected_rows(&self) -> usize {
        self.selected_rows
    }

    pub fn memory_tokens(&self) -> Matrix {
        self.rows.slice_rows(0, self.memory_rows)
    }

    pub fn separator(&self) -> &[f64] {
        self.rows.row(self.memory_rows)
    }

    pub fn selected_tokens(&self) -> Matrix {
        self.rows.slice_rows(self.memory_rows + 1, self.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(LLM_INPUT_MAGIC);
        w.count(self.len())?;
        w.count(self.dim())?;
        w.count(self.memory_rows)?;
        w.count(self.selected_rows)?;
        w.f32s(self.rows.data())?;
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, LLM_INPUT_MAGIC)?;
        let (total, d, memory_rows, selected_rows) = (r.count()?, r.count()?, r.count()?, r.count()?);
        if d == 0 || memory_rows.checked_add(selected_rows).and_then(|n| n.checked_add(1)) != Some(total) {
            return Err(Error::Malformed(format!(
                "layout total={total} memory={memory_rows} selected={selected_rows} d={d}"
            )));
        }
        let n = checked_product(&[total, d])?;
        let rows = Matrix::new(total, d, r.f32s(n)?)?;
        r.expect_end()?;
        Ok(LLMInputSequence {
            rows,
            memory_rows,
            selected_rows,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LLMInputSequence::from_bytes(&fs::read(path)?)
    }
}

/// Builds `⟨m_0, m_1, …, τ, Ẑ⟩` with selected frames in ascending order,
/// whatever order `selection.centers` is given in.
pub fn assemble(bank: &MemoryBank, selection: &SelectionResult, separator: &[f64]) -> Result<LLMInputSequence> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let d = bank.dim();
    if separator.len() != d {
        return Err(Error::shape(
            "assemble",
            format!("separator has {} entries, dim is {d}", separator.len()),
        ));
    }
    if selection.centers.len() != selection.pooled.len() {
        return Err(Error::shape("assemble", "one pooled matrix per centre"));
    }
    let mut order: Vec<usize> = (0..selection.centers.len()).collect();
    order.sort_by_key(|&i| selection.centers[i]);
    if order.windows(2).any(|w| selection.centers[w[0]] == selection.centers[w[1]]) {
        return Err(Error::InvalidArgument("duplicate selected frame".into()));
    }
    for m in &selection.pooled {
        if m.cols() != d {
            return Err(Error::shape("assemble", format!("pooled width {} != dim {d}", m.cols())));
        }
    }

    let memory_rows = bank.token_count();
    let selected_rows: usize = selection.pooled.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity((memory_rows + 1 + selected_rows) * d);
    for e in bank.entries() {
        data.extend_from_slice(e.tokens.data());
    }
    data.extend_from_slice(separator);
    for i in order {
        data.extend_from_slice(selection.pooled[i].data());
    }
    let rows = Matrix::new(memory_rows + 1 + selected_rows, d, data)?;
    rows.ensure_finite("assemble")?;
    Ok(LLMInputSequence {
        rows,
        memory_rows,
        selected_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryEntry;

    fn bank(t: usize, w: usize, d: usize) -> MemoryBank {
        let mut b = MemoryBank::new(w, d);
        for f in 0..t {
            b.append(MemoryEntry {
                frame_index: f as u32,
                subclip_index: 0,
                tokens: Matrix::from_fn(w, d, |r, c| (f * 100 + r * 10 + c) as f64),
            })
            .unwrap();
        }
        b
    }

    fn selection(centers: Vec<u32>, p: usize, d: usize) -> SelectionResult {
        SelectionResult {
            pooled: centers
                .iter()
                .map(|&f| Matrix::from_fn(p, d, |r, c| -((f as usize * 100 + r * 10 + c) as f64)))
                .collect(),
            centers,
            records: Vec::new(),
            diagnostics: None,
        }
    }

    #[test]
    fn length_and_sections() {
        let b = bank(4, 2, 3);
        let seq = assemble(&b, &selection(vec![2], 3, 3), &[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(seq.len(), 12);
        assert_eq!(seq.memory_rows(), 8);
        assert_eq!(seq.selected_rows(), 3);
        assert_eq!(seq.separator(), &[9.0, 9.0, 9.0]);
        assert_eq!(seq.memory_tokens(), b.flattened());
        assert_eq!(seq.selected_tokens().get(0, 1), -201.0);
    }

    #[test]
    fn centre_order_does_not_matter() {
        let b = bank(6, 2, 2);
        let a = assemble(&b, &selection(vec![1, 3, 5], 2, 2), &[0.0, 1.0]).unwrap();
        let c = assemble(&b, &selection(vec![5, 1, 3], 2, 2), &[0.0, 1.0]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn errors() {
        assert!(assemble(&MemoryBank::new(2, 2), &selection(vec![], 1, 2), &[0.0; 2]).is_err());
        assert!(assemble(&bank(2, 2, 2), &selection(vec![0], 1, 2), &[0.0; 3]).is_err());
        assert!(assemble(&bank(2, 2, 2), &selection(vec![1, 1], 1, 2), &[0.0; 2]).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let seq = assemble(&bank(3, 2, 4), &selection(vec![0, 2], 2, 4), &[0.5; 4]).unwrap();
        let bytes = seq.to_bytes().unwrap();
        let back = LLMInputSequence::from_bytes(&bytes).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[16] ^= 1;
        assert_eq!(LLMInputSequence::from_bytes(&bad).unwrap_err().code(), "format.malformed");
        assert_eq!(
            LLMInputSequence::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().code(),
            "format.truncated"
        );
    }
}
