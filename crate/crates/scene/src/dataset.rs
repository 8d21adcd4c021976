//! Binary dataset files (little-endian).
//!
//! ```text
//! "SFDS" u8 version=1
//! u32 episode_count, u16 H, u16 W, u8 n_views, u8 difficulty
//! per episode: u8 M, M × u16 instruction ids, u8 step_count, u8 success
//!   per step: 3 × f32 ee_pos, 4 × f32 action
//!     per view: H·W·3 × f32 image, H·W × f32 depth, H·W·3 × f32 pointmap,
//!               ceil(H·W / 8) bytes of mask bits (pixel i in bit i % 8 of byte i / 8)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::DatasetError;
use crate::expert::{Episode, Step};
use crate::render::RenderOutput;
use crate::scene::Difficulty;

pub const MAGIC: &[u8; 4] = b"SFDS";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub difficulty: Difficulty,
    pub height: usize,
    pub width: usize,
    pub n_views: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Infers the header from the episodes, which must agree on resolution
    /// and view count.
    pub fn new(difficulty: Difficulty, episodes: Vec<Episode>) -> Result<Self, DatasetError> {
        let first = episodes
            .iter()
            .flat_map(|e| e.steps.first())
            .next()
            .ok_or_else(|| DatasetError::Invalid("no steps to infer the header from".into()))?;
        let n_views = first.views.len();
        let (height, width) = (first.views[0].height, first.views[0].width);
        for e in &episodes {
            for s in &e.steps {
                if s.views.len() != n_views || s.views.iter().any(|v| v.height != height || v.width != width) {
                    return Err(DatasetError::Invalid("episodes disagree on camera configuration".into()));
                }
            }
        }
        Ok(Self { difficulty, height, width, n_views, episodes })
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        let count =
            u32::try_from(self.episodes.len()).map_err(|_| DatasetError::Invalid("too many episodes".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.push(self.n_views as u8);
        buf.push(self.difficulty.code());
        for e in &self.episodes {
            let m = u8::try_from(e.instruction_ids.len())
                .map_err(|_| DatasetError::Invalid("instruction too long".into()))?;
            buf.push(m);
            for id in &e.instruction_ids {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            let n = u8::try_from(e.steps.len()).map_err(|_| DatasetError::Invalid("episode too long".into()))?;
            buf.push(n);
            buf.push(e.success as u8);
            for s in &e.steps {
                put_f32s(&mut buf, &s.ee_pos);
                put_f32s(&mut buf, &s.action);
                for v in &s.views {
                    put_f32s(&mut buf, &v.image);
                    put_f32s(&mut buf, &v.depth);
                    put_f32s(&mut buf, &v.pointmap);
                    let mut bits = vec![0u8; v.mask.len().div_ceil(8)];
                    for (i, &m) in v.mask.iter().enumerate() {
                        if m {
                            bits[i / 8] |= 1 << (i % 8);
                        }
                    }
                    buf.extend_from_slice(&bits);
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(DatasetError::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u32()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let n_views = r.u8()? as usize;
        let code = r.u8()?;
        let difficulty =
            Difficulty::from_code(code).ok_or_else(|| DatasetError::Invalid(format!("difficulty code {code}")))?;
        let px = height * width;
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let m = r.u8()? as usize;
            let instruction_ids = (0..m).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
            let n = r.u8()? as usize;
            let success = r.u8()? != 0;
            let mut steps = Vec::with_capacity(n);
            for _ in 0..n {
                let ee = r.f32s(3)?;
                let act = r.f32s(4)?;
                let mut views = Vec::with_capacity(n_views);
                for _ in 0..n_views {
                    let image = r.f32s(px * 3)?;
                    let depth = r.f32s(px)?;
                    let pointmap = r.f32s(px * 3)?;
                    let bits = r.take(px.div_ceil(8))?;
                    let mask = (0..px).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
                    views.push(RenderOutput { height, width, image, depth, pointmap, mask });
                }
                steps.push(Step { views, ee_pos: [ee[0], ee[1], ee[2]], action: [act[0], act[1], act[2], act[3]] });
            }
            episodes.push(Episode { scene: None, instruction_ids, steps, success });
        }
        if r.pos != bytes.len() {
            return Err(DatasetError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { difficulty, height, width, n_views, episodes })
    }
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DatasetError::UnexpectedEof { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DatasetError> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let bytes = dataset.to_bytes()?;
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    Dataset::from_bytes(&bytes)
}
