//! Run-length encoding of binary masks.
//!
//! Runs alternate starting with a run of zeros (possibly empty), row-major.

use crate::error::{Error, Result};

pub fn encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bits {
        if b != current {
            runs.push(len);
            current = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn decode(runs: &[u32], len: usize) -> Result<Vec<bool>> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != len as u64 {
        return Err(Error::Data(format!("RLE covers {total} pixels, expected {len}")));
    }
    let mut out = Vec::with_capacity(len);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_with_zero_run() {
        assert_eq!(encode(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(encode(&[false, false]), vec![2]);
        assert_eq!(encode(&[]), vec![0]);
        assert_eq!(decode(&[0, 2, 1], 3).unwrap(), vec![true, true, false]);
        assert!(decode(&[1, 1], 3).is_err());
    }
}
