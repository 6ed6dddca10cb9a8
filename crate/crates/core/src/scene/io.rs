//! Binary scene container (`RGSC`) and a lossy JSON debug export.
//!
//! Layout (all little-endian):
//! magic `RGSC` · version u32 · count u32 · flags u32 · units f64 ·
//! per-Gaussian group bytes · optional eyeball blocks (9 f64 each) ·
//! field blocks as structure-of-arrays f64 in the order
//! pos, quat, log_scale, opacity_logit, albedo, d_c, d_m, rough_raw,
//! n_base, dn_view, v_view, albedo_view.
//!
//! Doubles (not floats) are stored so that save → load is bit-exact for
//! every numeric field and checkpoint resumes are seamless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use super::{
    EyeballParams, Gaussian, GaussianCloud, Group, TransferParams, D_C_LEN, D_M_LEN, VIEW_SH_LEN,
};
use crate::sphmath::Dir;
use crate::{Error, Result, Rgb, Vec3, Vec4};

const MAGIC: &[u8; 4] = b"RGSC";
const VERSION: u32 = 1;

const FLAG_EYE_LEFT: u32 = 1;
const FLAG_EYE_RIGHT: u32 = 2;
const FLAG_EYES_FROZEN: u32 = 4;

/// The SoA field blocks, in serialization order.
struct FieldSpec {
    name: &'static str,
    width: usize,
    get: fn(&GaussianCloud, usize, usize) -> f64,
    set: fn(&mut GaussianCloud, usize, usize, f64),
}

fn albedo_view_get(c: &GaussianCloud, i: usize, j: usize) -> f64 {
    match &c.transfer[i].albedo_view {
        Some(av) => av[j / 3][j % 3],
        None => 0.0,
    }
}

fn albedo_view_set(c: &mut GaussianCloud, i: usize, j: usize, v: f64) {
    if let Some(av) = &mut c.transfer[i].albedo_view {
        av[j / 3][j % 3] = v;
    }
}

fn fields() -> [FieldSpec; 12] {
    [
        FieldSpec {
            name: "pos",
            width: 3,
            get: |c, i, j| c.gaussians[i].pos[j],
            set: |c, i, j, v| c.gaussians[i].pos[j] = v,
        },
        FieldSpec {
            name: "quat",
            width: 4,
            get: |c, i, j| c.gaussians[i].quat[j],
            set: |c, i, j, v| c.gaussians[i].quat[j] = v,
        },
        FieldSpec {
            name: "log_scale",
            width: 3,
            get: |c, i, j| c.gaussians[i].log_scale[j],
            set: |c, i, j, v| c.gaussians[i].log_scale[j] = v,
        },
        FieldSpec {
            name: "opacity_logit",
            width: 1,
            get: |c, i, _| c.gaussians[i].opacity_logit,
            set: |c, i, _, v| c.gaussians[i].opacity_logit = v,
        },
        FieldSpec {
            name: "albedo",
            width: 3,
            get: |c, i, j| c.transfer[i].albedo[j],
            set: |c, i, j, v| c.transfer[i].albedo[j] = v,
        },
        FieldSpec {
            name: "d_c",
            width: 3 * D_C_LEN,
            get: |c, i, j| c.transfer[i].d_c[j / 3][j % 3],
            set: |c, i, j, v| c.transfer[i].d_c[j / 3][j % 3] = v,
        },
        FieldSpec {
            name: "d_m",
            width: D_M_LEN,
            get: |c, i, j| c.transfer[i].d_m[j],
            set: |c, i, j, v| c.transfer[i].d_m[j] = v,
        },
        FieldSpec {
            name: "rough_raw",
            width: 1,
            get: |c, i, _| c.transfer[i].rough_raw,
            set: |c, i, _, v| c.transfer[i].rough_raw = v,
        },
        FieldSpec {
            name: "n_base",
            width: 3,
            get: |c, i, j| c.transfer[i].n_base[j],
            set: |c, i, j, v| c.transfer[i].n_base[j] = v,
        },
        FieldSpec {
            name: "dn_view",
            width: 3 * VIEW_SH_LEN,
            get: |c, i, j| c.transfer[i].dn_view[j / 3][j % 3],
            set: |c, i, j, v| c.transfer[i].dn_view[j / 3][j % 3] = v,
        },
        FieldSpec {
            name: "v_view",
            width: VIEW_SH_LEN,
            get: |c, i, j| c.transfer[i].v_view[j],
            set: |c, i, j, v| c.transfer[i].v_view[j] = v,
        },
        FieldSpec {
            name: "albedo_view",
            width: 3 * VIEW_SH_LEN,
            get: albedo_view_get,
            set: albedo_view_set,
        },
    ]
}

fn scan_non_finite(cloud: &GaussianCloud) -> Option<String> {
    for f in fields() {
        for i in 0..cloud.len() {
            for j in 0..f.width {
                if !(f.get)(cloud, i, j).is_finite() {
                    return Some(format!("{} at gaussian {i}", f.name));
                }
            }
        }
    }
    None
}

fn write_eye(w: &mut impl Write, e: &EyeballParams) -> Result<()> {
    for v in [e.r_e, e.r_c, e.d, e.center.x, e.center.y, e.center.z, e.gaze.x, e.gaze.y, e.gaze.z] {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_eye(r: &mut impl Read, path: &str) -> Result<EyeballParams> {
    let mut v = [0.0; 9];
    for slot in &mut v {
        *slot = r.read_f64::<LittleEndian>()?;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "non-finite eyeball parameters"));
    }
    Ok(EyeballParams {
        r_e: v[0],
        r_c: v[1],
        d: v[2],
        center: Vec3::new(v[3], v[4], v[5]),
        gaze: Dir::from_xyz(v[6], v[7], v[8])
            .map_err(|_| Error::format(path, "degenerate gaze direction"))?,
    })
}

/// Saves the cloud; rejects non-finite fields naming the offender.
pub fn save_scene(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    if let Some(loc) = scan_non_finite(cloud) {
        return Err(Error::NonFinite(loc));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(cloud.len() as u32)?;
    let mut flags = 0;
    if cloud.eye_left.is_some() {
        flags |= FLAG_EYE_LEFT;
    }
    if cloud.eye_right.is_some() {
        flags |= FLAG_EYE_RIGHT;
    }
    if cloud.eyes_frozen {
        flags |= FLAG_EYES_FROZEN;
    }
    w.write_u32::<LittleEndian>(flags)?;
    w.write_f64::<LittleEndian>(cloud.units_per_meter)?;
    for g in &cloud.gaussians {
        w.write_u8(g.group.to_u8())?;
    }
    if let Some(e) = &cloud.eye_left {
        write_eye(&mut w, e)?;
    }
    if let Some(e) = &cloud.eye_right {
        write_eye(&mut w, e)?;
    }
    for f in fields() {
        for i in 0..cloud.len() {
            for j in 0..f.width {
                w.write_f64::<LittleEndian>((f.get)(cloud, i, j))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a version-1 scene file, verifying magic, version, completeness
/// and numeric sanity (errors name the offending field and index).
pub fn load_scene(path: &Path) -> Result<GaussianCloud> {
    let p = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&p, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(Error::format(&p, format!("bad magic {magic:?}, expected RGSC")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(
            &p,
            format!("unsupported version {version}; this reader supports {VERSION}"),
        ));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count > 50_000_000 {
        return Err(Error::format(&p, format!("implausible gaussian count {count}")));
    }
    let flags = r.read_u32::<LittleEndian>()?;
    let units = r.read_f64::<LittleEndian>()?;

    let mut group_bytes = vec![0u8; count];
    r.read_exact(&mut group_bytes)
        .map_err(|_| Error::format(&p, "truncated group table"))?;
    let mut groups = Vec::with_capacity(count);
    for (i, b) in group_bytes.iter().enumerate() {
        groups.push(
            Group::from_u8(*b)
                .map_err(|_| Error::format(&p, format!("bad group id {b} at gaussian {i}")))?,
        );
    }

    let eye_left =
        if flags & FLAG_EYE_LEFT != 0 { Some(read_eye(&mut r, &p)?) } else { None };
    let eye_right =
        if flags & FLAG_EYE_RIGHT != 0 { Some(read_eye(&mut r, &p)?) } else { None };

    let mut cloud = GaussianCloud {
        gaussians: groups
            .iter()
            .map(|&group| Gaussian {
                pos: Vec3::zeros(),
                quat: Vec4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vec3::zeros(),
                opacity_logit: 0.0,
                group,
            })
            .collect(),
        transfer: groups
            .iter()
            .map(|&group| TransferParams {
                albedo_view: group.is_eye().then(|| [Rgb::zeros(); VIEW_SH_LEN]),
                ..TransferParams::neutral()
            })
            .collect(),
        eye_left,
        eye_right,
        eyes_frozen: flags & FLAG_EYES_FROZEN != 0,
        units_per_meter: units,
    };

    for f in fields() {
        for i in 0..count {
            for j in 0..f.width {
                let v = r.read_f64::<LittleEndian>().map_err(|_| {
                    Error::format(&p, format!("truncated in block {} at gaussian {i}", f.name))
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        &p,
                        format!("non-finite {} at gaussian {i}", f.name),
                    ));
                }
                (f.set)(&mut cloud, i, j, v);
            }
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format(&p, "trailing data after parameter blocks"));
    }
    cloud.validate()?;
    Ok(cloud)
}

#[derive(Serialize)]
struct JsonEye {
    r_e: f64,
    r_c: f64,
    d: f64,
    center: [f64; 3],
    gaze: [f64; 3],
}

#[derive(Serialize)]
struct JsonGaussian {
    group: &'static str,
    pos: [f64; 3],
    quat: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    albedo: [f64; 3],
    rough_raw: f64,
    n_base: [f64; 3],
    d_c: Vec<[f64; 3]>,
    d_m: Vec<f64>,
    dn_view: Vec<[f64; 3]>,
    v_view: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    albedo_view: Option<Vec<[f64; 3]>>,
}

#[derive(Serialize)]
struct JsonCloud {
    format: &'static str,
    version: u32,
    units_per_meter: f64,
    eyes_frozen: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    eye_left: Option<JsonEye>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eye_right: Option<JsonEye>,
    gaussians: Vec<JsonGaussian>,
}

fn vec3a(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn json_eye(e: &EyeballParams) -> JsonEye {
    JsonEye { r_e: e.r_e, r_c: e.r_c, d: e.d, center: vec3a(e.center), gaze: vec3a(e.gaze.as_vec()) }
}

/// Human-readable JSON dump for debugging (round-trip not guaranteed).
pub fn export_json(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let doc = JsonCloud {
        format: "rgsc-debug",
        version: VERSION,
        units_per_meter: cloud.units_per_meter,
        eyes_frozen: cloud.eyes_frozen,
        eye_left: cloud.eye_left.as_ref().map(json_eye),
        eye_right: cloud.eye_right.as_ref().map(json_eye),
        gaussians: cloud
            .gaussians
            .iter()
            .zip(&cloud.transfer)
            .map(|(g, tp)| JsonGaussian {
                group: match g.group {
                    Group::Head => "head",
                    Group::LeftEye => "left_eye",
                    Group::RightEye => "right_eye",
                },
                pos: vec3a(g.pos),
                quat: [g.quat.x, g.quat.y, g.quat.z, g.quat.w],
                log_scale: vec3a(g.log_scale),
                opacity_logit: g.opacity_logit,
                albedo: vec3a(tp.albedo),
                rough_raw: tp.rough_raw,
                n_base: vec3a(tp.n_base),
                d_c: tp.d_c.iter().map(|c| vec3a(*c)).collect(),
                d_m: tp.d_m.to_vec(),
                dn_view: tp.dn_view.iter().map(|c| vec3a(*c)).collect(),
                v_view: tp.v_view.to_vec(),
                albedo_view: tp.albedo_view.as_ref().map(|av| av.iter().map(|c| vec3a(*c)).collect()),
            })
            .collect(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}
