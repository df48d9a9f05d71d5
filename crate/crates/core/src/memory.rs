//! Per-task memory banks under a global vector budget and the continual
//! update that re-balances them as tasks arrive.
//!
//! `CLMB` layout (little-endian):
//!
//! ```text
//! header  magic "CLMB" | version u16 = 1 | dim u32 | memory_size u32 | num_banks u32
//! bank    task_index u32 | name_len u16 | name utf8 | num_vectors u64
//!         | payload num_vectors*dim f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::coreset::{coreset_subsample, CoresetParams};
use crate::error::{Error, Result};
use crate::feature::VectorSet;

pub const BANK_MAGIC: [u8; 4] = *b"CLMB";
pub const BANK_VERSION: u16 = 1;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed used to build the bank of task `task` from its raw patches.
pub fn task_seed(seed: u64, task: usize) -> u64 {
    splitmix64(seed ^ splitmix64(task as u64))
}

/// Seed used to re-subsample bank `bank` during the update for task `update`.
pub fn resample_seed(seed: u64, update: usize, bank: usize) -> u64 {
    splitmix64(task_seed(seed, update) ^ splitmix64((bank as u64) | (1 << 40)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub task_index: usize,
    pub name: String,
    pub vectors: VectorSet,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }
}

/// Bank of `min(budget, |patches|)` vectors chosen by coreset subsampling.
pub fn build_single_bank(
    task_index: usize,
    name: impl Into<String>,
    patches: &VectorSet,
    budget: usize,
    seed: u64,
) -> Result<MemoryBank> {
    if patches.is_empty() {
        return Err(Error::Empty("bank patches"));
    }
    let picked = coreset_subsample(patches, &CoresetParams::new(budget, seed))?;
    Ok(MemoryBank { task_index, name: name.into(), vectors: patches.select(&picked) })
}

/// Ordered list of per-task banks sharing one vector budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBankSet {
    memory_size: usize,
    dim: usize,
    banks: Vec<MemoryBank>,
}

impl MemoryBankSet {
    pub fn new(memory_size: usize, dim: usize) -> Result<Self> {
        Self::from_banks(memory_size, dim, Vec::new())
    }

    /// Wraps existing banks. Task indices must be strictly increasing and the
    /// total must fit the budget.
    pub fn from_banks(memory_size: usize, dim: usize, banks: Vec<MemoryBank>) -> Result<Self> {
        if memory_size == 0 {
            return Err(Error::InvalidParameter("memory size must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("bank dimension must be positive".into()));
        }
        for (i, b) in banks.iter().enumerate() {
            if b.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, found: b.dim() });
            }
            if i > 0 && b.task_index <= banks[i - 1].task_index {
                return Err(Error::Malformed("banks are not in task order".into()));
            }
        }
        let set = Self { memory_size, dim, banks };
        if set.total_vectors() > memory_size {
            return Err(Error::InvalidParameter(format!(
                "{} stored vectors exceed the budget of {memory_size}",
                set.total_vectors()
            )));
        }
        Ok(set)
    }

    pub fn memory_size(&self) -> usize {
        self.memory_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn banks(&self) -> &[MemoryBank] {
        &self.banks
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn total_vectors(&self) -> usize {
        self.banks.iter().map(MemoryBank::len).sum()
    }

    /// Per-bank quota once task `task_index` has been added.
    pub fn quota(&self, task_index: usize) -> usize {
        self.memory_size / (task_index + 1)
    }

    /// Adds task `task_index`: every stored bank is coreset-subsampled down to
    /// `floor(memory_size / (task_index + 1))` vectors from its own contents,
    /// then the new patches are subsampled to the same quota and appended.
    ///
    /// The set is left untouched when an error is returned.
    pub fn continual_update(
        &mut self,
        name: impl Into<String>,
        new_patches: &VectorSet,
        task_index: usize,
        seed: u64,
    ) -> Result<()> {
        if task_index != self.banks.len() {
            return Err(Error::OutOfOrderTask { expected: self.banks.len(), found: task_index });
        }
        if new_patches.is_empty() {
            return Err(Error::Empty("task patches"));
        }
        if new_patches.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: new_patches.dim() });
        }
        let quota = self.quota(task_index);
        if quota == 0 {
            return Err(Error::InvalidParameter(format!(
                "memory size {} leaves no room for task {task_index}",
                self.memory_size
            )));
        }

        for (j, bank) in self.banks.iter_mut().enumerate() {
            if bank.len() > quota {
                let keep = coreset_subsample(
                    &bank.vectors,
                    &CoresetParams::new(quota, resample_seed(seed, task_index, j)),
                )?;
                bank.vectors = bank.vectors.select(&keep);
            }
        }
        let bank = build_single_bank(task_index, name, new_patches, quota, task_seed(seed, task_index))?;
        self.banks.push(bank);
        debug_assert!(self.total_vectors() <= self.memory_size);
        Ok(())
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&binio::to_u32(self.dim, "dim")?.to_le_bytes())?;
        w.write_all(&binio::to_u32(self.memory_size, "memory_size")?.to_le_bytes())?;
        w.write_all(&binio::to_u32(self.banks.len(), "num_banks")?.to_le_bytes())?;
        for bank in &self.banks {
            w.write_all(&binio::to_u32(bank.task_index, "task_index")?.to_le_bytes())?;
            let name = bank.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidParameter(format!("bank name `{}` is too long", bank.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(bank.len() as u64).to_le_bytes())?;
            binio::write_f32s(w, bank.vectors.as_slice())?;
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, BANK_MAGIC)?;
        binio::read_version(r, BANK_VERSION)?;
        let dim = binio::read_u32(r, "header")? as usize;
        let memory_size = binio::read_u32(r, "header")? as usize;
        let num_banks = binio::read_u32(r, "header")? as usize;
        if dim == 0 {
            return Err(Error::Malformed("bank dimension is zero".into()));
        }
        let mut banks = Vec::with_capacity(num_banks.min(1024));
        for _ in 0..num_banks {
            let task_index = binio::read_u32(r, "bank header")? as usize;
            let name_len = binio::read_u16(r, "bank header")? as usize;
            let name = String::from_utf8(binio::read_bytes(r, name_len, "bank name")?)
                .map_err(|_| Error::Malformed("bank name is not valid utf-8".into()))?;
            let count = usize::try_from(binio::read_u64(r, "bank header")?)
                .map_err(|_| Error::Malformed("vector count overflows".into()))?;
            let values = count
                .checked_mul(dim)
                .ok_or_else(|| Error::Malformed("vector count overflows".into()))?;
            let vectors = VectorSet::new(dim, binio::read_f32s(r, values, "bank payload")?)?;
            banks.push(MemoryBank { task_index, name, vectors });
        }
        binio::expect_eof(r)?;
        Self::from_banks(memory_size, dim, banks)
    }
}

pub fn save_banks(set: &MemoryBankSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    set.encode(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_banks(path: impl AsRef<Path>) -> Result<MemoryBankSet> {
    MemoryBankSet::decode(&mut BufReader::new(File::open(path)?))
}

/// Loads a bank file and checks it stores vectors of `expected_dim`.
pub fn load_banks_with_dim(path: impl AsRef<Path>, expected_dim: usize) -> Result<MemoryBankSet> {
    let set = load_banks(path)?;
    if set.dim() != expected_dim {
        return Err(Error::DimMismatch { expected: expected_dim, found: set.dim() });
    }
    Ok(set)
}
