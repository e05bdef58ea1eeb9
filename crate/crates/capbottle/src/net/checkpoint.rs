//! Parameter checkpoints: magic "PSNN", version, architecture block, layer
//! table, raw little-endian doubles. Round-trips are exact.

use super::{Architecture, ConvSpec, NetError, NetworkParams};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSNN";
const VERSION: u16 = 1;

fn write_arch(w: &mut impl Write, a: &Architecture) -> std::io::Result<()> {
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(text, "input = {}", a.input);
    for (name, c) in [("conv1", a.conv1), ("conv2", a.conv2), ("conv3", a.conv3)] {
        let _ = writeln!(text, "{name}.out_ch = {}", c.out_ch);
        let _ = writeln!(text, "{name}.kernel = {}", c.kernel);
        let _ = writeln!(text, "{name}.stride = {}", c.stride);
    }
    let _ = writeln!(text, "dense1 = {}", a.dense1);
    let _ = writeln!(text, "dense2 = {}", a.dense2);
    let _ = writeln!(text, "hook_pool = {}", a.hook_pool);
    let _ = writeln!(text, "hook_width = {}", a.hook_width);
    let _ = writeln!(text, "action_scale = {}", a.action_scale);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())
}

fn parse_arch(text: &str) -> Result<Architecture, NetError> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<f64, NetError> {
        map.get(k)
            .ok_or_else(|| NetError::Config(format!("checkpoint missing architecture key `{k}`")))?
            .parse()
            .map_err(|e| NetError::Config(format!("bad architecture value for `{k}`: {e}")))
    };
    let conv = |name: &str| -> Result<ConvSpec, NetError> {
        Ok(ConvSpec {
            out_ch: get(&format!("{name}.out_ch"))? as usize,
            kernel: get(&format!("{name}.kernel"))? as usize,
            stride: get(&format!("{name}.stride"))? as usize,
        })
    };
    Ok(Architecture {
        input: get("input")? as usize,
        conv1: conv("conv1")?,
        conv2: conv("conv2")?,
        conv3: conv("conv3")?,
        dense1: get("dense1")? as usize,
        dense2: get("dense2")? as usize,
        hook_pool: get("hook_pool")? as usize,
        hook_width: get("hook_width")? as usize,
        action_scale: get("action_scale")?,
    })
}

pub fn save_params(params: &NetworkParams, path: &Path) -> Result<(), NetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_arch(&mut w, &params.arch)?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for d in &shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams, NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NetError> {
        if *pos + n > bytes.len() {
            return Err(NetError::Truncated(*pos + n - bytes.len()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(NetError::FormatMismatch);
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(NetError::UnsupportedVersion(version));
    }
    let alen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let atext = std::str::from_utf8(take(&mut pos, alen)?)
        .map_err(|e| NetError::Config(format!("architecture block not utf-8: {e}")))?;
    let arch = parse_arch(atext)?;
    let mut params = NetworkParams::zeros(arch);

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut loaded = std::collections::BTreeMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|e| NetError::Config(format!("tensor name not utf-8: {e}")))?
            .to_string();
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, (shape, data));
    }

    for (name, slot) in params.tensors_mut() {
        let (shape, data) = loaded
            .remove(name)
            .ok_or_else(|| NetError::Config(format!("checkpoint missing tensor `{name}`")))?;
        if data.len() != slot.len() {
            return Err(NetError::Config(format!(
                "tensor `{name}` has {} values (shape {shape:?}), expected {}",
                data.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&data);
    }
    if let Some(name) = loaded.into_keys().next() {
        return Err(NetError::Config(format!("checkpoint has unexpected tensor `{name}`")));
    }
    Ok(params)
}
