//! smallNORB binary matrix files.
//!
//! A file is a little-endian header `magic: i32, ndim: i32, dims: [i32;
//! max(3, ndim)]` followed by the row-major payload. Unused trailing dims of
//! low-rank matrices are stored as 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::image::Image;

/// Examples per split of the published dataset.
pub const SPLIT_EXAMPLES: usize = 24300;
pub const CATEGORIES: usize = 5;
pub const SIDE: usize = 96;

/// Element type of a matrix, identified by its magic number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemType {
    U8,
    I32,
    F32,
    F64,
    I16,
}

impl ElemType {
    pub fn magic(self) -> u32 {
        match self {
            ElemType::U8 => 0x1E3D_4C55,
            ElemType::I32 => 0x1E3D_4C54,
            ElemType::F32 => 0x1E3D_4C51,
            ElemType::F64 => 0x1E3D_4C53,
            ElemType::I16 => 0x1E3D_4C56,
        }
    }

    pub fn from_magic(magic: u32) -> Option<Self> {
        [ElemType::U8, ElemType::I32, ElemType::F32, ElemType::F64, ElemType::I16]
            .into_iter()
            .find(|t| t.magic() == magic)
    }

    pub fn size(self) -> usize {
        match self {
            ElemType::U8 => 1,
            ElemType::I16 => 2,
            ElemType::I32 | ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }
}

/// Decoded matrix payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    I16(Vec<i16>),
}

impl Payload {
    pub fn elem_type(&self) -> ElemType {
        match self {
            Payload::U8(_) => ElemType::U8,
            Payload::I32(_) => ElemType::I32,
            Payload::F32(_) => ElemType::F32,
            Payload::F64(_) => ElemType::F64,
            Payload::I16(_) => ElemType::I16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::I32(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Matrix header: element type plus the dims exactly as stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub elem: ElemType,
    pub ndim: usize,
    /// All stored dims, including padding entries beyond `ndim`.
    pub stored_dims: Vec<i32>,
}

impl Header {
    pub fn new(elem: ElemType, shape: &[usize]) -> Self {
        let mut stored_dims: Vec<i32> = shape.iter().map(|&d| d as i32).collect();
        while stored_dims.len() < 3 {
            stored_dims.push(1);
        }
        Header {
            elem,
            ndim: shape.len(),
            stored_dims,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.stored_dims[..self.ndim].iter().map(|&d| d as usize).collect()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn byte_len(&self) -> usize {
        8 + 4 * self.stored_dims.len()
    }

    pub fn read(r: &mut impl Read) -> Result<Header> {
        let magic = read_i32(r)? as u32;
        let elem = ElemType::from_magic(magic)
            .ok_or_else(|| Error::Format(format!("unknown matrix magic {magic:#010x}")))?;
        let ndim = read_i32(r)?;
        if !(0..=16).contains(&ndim) {
            return Err(Error::Format(format!("implausible dimension count {ndim}")));
        }
        let ndim = ndim as usize;
        let stored_dims = (0..ndim.max(3)).map(|_| read_i32(r)).collect::<Result<Vec<_>>>()?;
        if stored_dims[..ndim].iter().any(|&d| d < 0) {
            return Err(Error::Format(format!("negative extent in {stored_dims:?}")));
        }
        Ok(Header {
            elem,
            ndim,
            stored_dims,
        })
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.elem.magic().to_le_bytes())?;
        w.write_all(&(self.ndim as i32).to_le_bytes())?;
        for d in &self.stored_dims {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }
}

fn read_i32(r: &mut impl Read) -> Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated matrix header".into()))?;
    Ok(i32::from_le_bytes(b))
}

/// A whole matrix file held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct NorbMatrix {
    pub header: Header,
    pub payload: Payload,
}

impl NorbMatrix {
    pub fn new(shape: &[usize], payload: Payload) -> Result<Self> {
        let header = Header::new(payload.elem_type(), shape);
        if header.numel() != payload.len() {
            return Err(Error::Data(format!(
                "shape {shape:?} needs {} values, payload has {}",
                header.numel(),
                payload.len()
            )));
        }
        Ok(NorbMatrix { header, payload })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.header.shape()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let header = Header::read(&mut r)?;
        let n = header.numel();
        let need = n * header.elem.size();
        if r.len() < need {
            return Err(Error::Format(format!(
                "payload truncated: {} of {need} bytes",
                r.len()
            )));
        }
        if r.len() > need {
            return Err(Error::Format(format!("{} trailing bytes after payload", r.len() - need)));
        }
        let payload = match header.elem {
            ElemType::U8 => Payload::U8(r.to_vec()),
            ElemType::I32 => Payload::I32(r.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            ElemType::F32 => Payload::F32(r.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            ElemType::F64 => Payload::F64(r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            ElemType::I16 => Payload::I16(r.chunks_exact(2).map(|c| i16::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(NorbMatrix { header, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.byte_len() + self.payload.len() * self.header.elem.size());
        self.header.write(&mut out).expect("writing to a Vec cannot fail");
        match &self.payload {
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.payload {
            Payload::I32(v) => Ok(v),
            other => Err(Error::Format(format!("expected an int32 matrix, found {:?}", other.elem_type()))),
        }
    }
}

/// Which half of the dataset to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NorbSplit {
    Train,
    Test,
}

impl NorbSplit {
    fn stem(self) -> &'static str {
        match self {
            NorbSplit::Train => "smallnorb-5x46789x9x18x6x2x96x96-training",
            NorbSplit::Test => "smallnorb-5x01235x9x18x6x2x96x96-testing",
        }
    }

    /// Path of the `dat`, `cat` or `info` file of this split.
    pub fn file(self, dir: &Path, kind: &str) -> PathBuf {
        dir.join(format!("{}-{kind}.mat", self.stem()))
    }

    pub fn name(self) -> &'static str {
        match self {
            NorbSplit::Train => "train",
            NorbSplit::Test => "test",
        }
    }

    /// Toy instances photographed in this split.
    pub fn instances(self) -> [i32; 5] {
        match self {
            NorbSplit::Train => [4, 6, 7, 8, 9],
            NorbSplit::Test => [0, 1, 2, 3, 5],
        }
    }
}

/// What counts as "the same object" in smallNORB pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NorbIdentity {
    /// One class per physical toy: `category · 10 + instance`.
    #[default]
    Instance,
    /// One class per category.
    Category,
}

/// Loader options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NorbOptions {
    pub identity: NorbIdentity,
    /// Required example count; `None` accepts any consistent count.
    pub expected_examples: Option<usize>,
    /// Box-filter downscale factor applied while decoding.
    pub downscale: usize,
}

impl Default for NorbOptions {
    fn default() -> Self {
        NorbOptions {
            identity: NorbIdentity::Instance,
            expected_examples: Some(SPLIT_EXAMPLES),
            downscale: 1,
        }
    }
}

/// Loads one split as stereo `96 × 96 × 2` images scaled to `[0, 1]`.
pub fn load_smallnorb_split(dir: &Path, split: NorbSplit, opts: &NorbOptions) -> Result<Dataset> {
    let cat = NorbMatrix::read(&split.file(dir, "cat"))?;
    let info = NorbMatrix::read(&split.file(dir, "info"))?;
    let categories = cat.as_i32()?;
    let info_shape = info.shape();
    let info_vals = info.as_i32()?;
    let n = categories.len();
    if let Some(expected) = opts.expected_examples {
        if n != expected {
            return Err(Error::Data(format!("{} split has {n} categories, expected {expected}", split.name())));
        }
    }
    if info_shape.first() != Some(&n) || info_shape.len() != 2 || info_shape[1] < 1 {
        return Err(Error::Data(format!("info matrix {info_shape:?} does not match {n} examples")));
    }
    let info_cols = info_shape[1];

    let dat_path = split.file(dir, "dat");
    let file = File::open(&dat_path).map_err(|e| Error::io(&dat_path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let header = Header::read(&mut r).map_err(|e| e.context(dat_path.display()))?;
    if header.elem != ElemType::U8 {
        return Err(Error::Format(format!("{} holds {:?}, expected bytes", dat_path.display(), header.elem)));
    }
    let shape = header.shape();
    if shape.len() != 4 || shape[1] != 2 || shape[2] != shape[3] {
        return Err(Error::Format(format!("image matrix shape {shape:?}, expected [N, 2, S, S]")));
    }
    if shape[0] != n {
        return Err(Error::Data(format!("{} images but {n} labels", shape[0])));
    }
    let side = shape[2];
    let plane = side * side;
    let mut buf = vec![0u8; 2 * plane];
    let mut images = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!("{} truncated at example {i}", dat_path.display()))
        })?;
        let mut data = vec![0f32; 2 * plane];
        for p in 0..plane {
            data[2 * p] = buf[p] as f32 / 255.0;
            data[2 * p + 1] = buf[plane + p] as f32 / 255.0;
        }
        let mut img = Image::new(side, side, 2, data)?;
        if opts.downscale > 1 {
            img = img.downscale(opts.downscale)?;
        }
        images.push(img);
        let category = categories[i];
        if !(0..CATEGORIES as i32).contains(&category) {
            return Err(Error::Data(format!("example {i} has category {category}")));
        }
        let instance = info_vals[i * info_cols];
        let class = match opts.identity {
            NorbIdentity::Instance => category as usize * 10 + instance as usize,
            NorbIdentity::Category => category as usize,
        };
        class_ids.push(class);
        origins.push(format!("{}:{i}", split.name()));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(&dat_path, e))? != 0 {
        return Err(Error::Format(format!("{} has trailing bytes", dat_path.display())));
    }
    Dataset::new(
        images,
        class_ids,
        origins,
        DatasetMeta {
            source: format!("smallnorb-{}", split.name()),
            synthetic: false,
        },
    )
}

/// Loads both splits with default options.
pub fn load_smallnorb(dir: &Path) -> Result<(Dataset, Dataset)> {
    let opts = NorbOptions::default();
    Ok((
        load_smallnorb_split(dir, NorbSplit::Train, &opts)?,
        load_smallnorb_split(dir, NorbSplit::Test, &opts)?,
    ))
}

/// Writes a format-conformant stand-in split with the published layout:
/// 5 categories × 5 instances × 9 elevations × 18 azimuths × 6 lightings.
/// Pixel content is a cheap procedural pattern, not real photographs.
pub fn write_standin_split(dir: &Path, split: NorbSplit, side: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cats = Vec::with_capacity(SPLIT_EXAMPLES);
    let mut info = Vec::with_capacity(SPLIT_EXAMPLES * 4);
    for c in 0..CATEGORIES as i32 {
        for &inst in &split.instances() {
            for elev in 0..9 {
                for az in 0..18 {
                    for light in 0..6 {
                        cats.push(c);
                        info.extend_from_slice(&[inst, elev, az * 2, light]);
                    }
                }
            }
        }
    }
    let n = cats.len();
    NorbMatrix::new(&[n], Payload::I32(cats.clone()))?.write(&split.file(dir, "cat"))?;
    NorbMatrix::new(&[n, 4], Payload::I32(info.clone()))?.write(&split.file(dir, "info"))?;

    let path = split.file(dir, "dat");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let io = |e| Error::io(&path, e);
    Header::new(ElemType::U8, &[n, 2, side, side]).write(&mut w).map_err(io)?;
    let mut plane = vec![0u8; side * side];
    for i in 0..n {
        let (c, inst, light) = (cats[i] as usize, info[i * 4] as usize, info[i * 4 + 3] as usize);
        for cam in 0..2 {
            for y in 0..side {
                for x in 0..side {
                    let v = (x * (c + 1) + y * (inst + 1) + 7 * cam + 11 * light + i) % 256;
                    plane[y * side + x] = v as u8;
                }
            }
            w.write_all(&plane).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
