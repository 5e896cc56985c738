//! Synthetic multi-view ground truth: analytic scenes of known Gaussians
//! with parametric motion (linear drift, sinusoidal articulation,
//! visibility schedules), rendered with the crate's own rasterizer so
//! reconstruction error is attributable to the pipeline alone.
//!
//! Scenes are described by a small line-based script; datasets are PPM
//! images plus a plain-text manifest.

use std::path::{Path, PathBuf};

use crate::render::{render, Camera, GaussianPrimitive, Image, RenderConfig};
use crate::{Error, Result};

/// Per-Gaussian motion over time, evaluated at integer frame indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    Static,
    /// world units per frame
    Linear([f64; 3]),
    /// x(t) = x0 + axis · amp · sin(2π · freq · t)
    Sine { axis: [f64; 3], amp: f64, freq: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub motion: Motion,
    /// α forced to exactly 0 for frames t0 ≤ t < t1
    pub vanish: Option<(u32, u32)>,
}

impl Default for Track {
    fn default() -> Self {
        Track { motion: Motion::Static, vanish: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneScript {
    pub frames: u32,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub cameras: Vec<Camera>,
    pub gaussians: Vec<GaussianPrimitive>,
    pub tracks: Vec<Track>,
}

pub const BUILTIN_STATIC: &str = include_str!("../scripts/static.scene");
pub const BUILTIN_DRIFT: &str = include_str!("../scripts/drift.scene");
pub const BUILTIN_VANISH: &str = include_str!("../scripts/vanish.scene");

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| perr(line, format!("expected a number, got '{tok}'")))
}

fn parse_u32(tok: &str, line: usize) -> Result<u32> {
    tok.parse::<u32>()
        .map_err(|_| perr(line, format!("expected an integer, got '{tok}'")))
}

fn take<'a>(toks: &mut impl Iterator<Item = &'a str>, line: usize, what: &str) -> Result<&'a str> {
    toks.next().ok_or_else(|| perr(line, format!("missing {what}")))
}

fn take3(toks: &mut std::str::SplitWhitespace, line: usize, what: &str) -> Result<[f64; 3]> {
    let mut v = [0.0; 3];
    for c in &mut v {
        *c = parse_f64(take(toks, line, what)?, line)?;
    }
    Ok(v)
}

impl SceneScript {
    /// Look up one of the canonical fixtures by name.
    pub fn builtin(name: &str) -> Result<SceneScript> {
        let text = match name {
            "static" => BUILTIN_STATIC,
            "drift" => BUILTIN_DRIFT,
            "vanish" => BUILTIN_VANISH,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown built-in scene '{other}' (available: static, drift, vanish)"
                )))
            }
        };
        SceneScript::parse(text)
    }

    pub fn parse(text: &str) -> Result<SceneScript> {
        let mut frames = None;
        let mut resolution = None;
        let mut background = [0.0; 3];
        let mut ring: Option<(usize, f64, f64, f64)> = None;
        let mut explicit_cams: Vec<([f64; 3], [f64; 3], f64)> = Vec::new();
        let mut gaussians: Vec<GaussianPrimitive> = Vec::new();
        let mut tracks: Vec<Track> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let key = toks.next().unwrap();
            match key {
                "frames" => {
                    frames = Some(parse_u32(take(&mut toks, ln, "frame count")?, ln)?);
                }
                "resolution" => {
                    let w = parse_u32(take(&mut toks, ln, "width")?, ln)? as usize;
                    let h = parse_u32(take(&mut toks, ln, "height")?, ln)? as usize;
                    resolution = Some((w, h));
                }
                "background" => {
                    background = take3(&mut toks, ln, "background color")?;
                }
                "cameras" => {
                    let kind = take(&mut toks, ln, "camera layout")?;
                    if kind != "ring" {
                        return Err(perr(ln, format!("unknown camera layout '{kind}'")));
                    }
                    let count = parse_u32(take(&mut toks, ln, "camera count")?, ln)? as usize;
                    let radius = parse_f64(take(&mut toks, ln, "ring radius")?, ln)?;
                    let height = parse_f64(take(&mut toks, ln, "ring height")?, ln)?;
                    let focal = parse_f64(take(&mut toks, ln, "focal length")?, ln)?;
                    ring = Some((count, radius, height, focal));
                }
                "camera" => {
                    let eye = take3(&mut toks, ln, "camera eye")?;
                    let target = take3(&mut toks, ln, "camera target")?;
                    let focal = parse_f64(take(&mut toks, ln, "focal length")?, ln)?;
                    explicit_cams.push((eye, target, focal));
                }
                "gaussian" => {
                    let mu = take3(&mut toks, ln, "position")?;
                    let s = take3(&mut toks, ln, "scale")?;
                    let mut rot = [0.0; 4];
                    for c in &mut rot {
                        *c = parse_f64(take(&mut toks, ln, "rotation")?, ln)?;
                    }
                    let color = take3(&mut toks, ln, "color")?;
                    let alpha = parse_f64(take(&mut toks, ln, "alpha")?, ln)?;
                    let n = (rot.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    if n < 1e-12 {
                        return Err(perr(ln, "zero-norm rotation quaternion"));
                    }
                    for c in &mut rot {
                        *c /= n;
                    }
                    gaussians.push(GaussianPrimitive { mu, s, rot, color, alpha });
                    tracks.push(Track::default());
                }
                "track" => {
                    let idx = parse_u32(take(&mut toks, ln, "gaussian index")?, ln)? as usize;
                    if idx >= gaussians.len() {
                        return Err(perr(
                            ln,
                            format!("track references gaussian {idx} of {}", gaussians.len()),
                        ));
                    }
                    let kind = take(&mut toks, ln, "track kind")?;
                    match kind {
                        "static" => tracks[idx].motion = Motion::Static,
                        "linear" => {
                            tracks[idx].motion =
                                Motion::Linear(take3(&mut toks, ln, "velocity")?);
                        }
                        "sine" => {
                            let axis = take3(&mut toks, ln, "axis")?;
                            let amp = parse_f64(take(&mut toks, ln, "amplitude")?, ln)?;
                            let freq = parse_f64(take(&mut toks, ln, "frequency")?, ln)?;
                            tracks[idx].motion = Motion::Sine { axis, amp, freq };
                        }
                        "vanish" => {
                            let t0 = parse_u32(take(&mut toks, ln, "start frame")?, ln)?;
                            let t1 = parse_u32(take(&mut toks, ln, "end frame")?, ln)?;
                            if t1 <= t0 {
                                return Err(perr(ln, "vanish interval must be non-empty"));
                            }
                            tracks[idx].vanish = Some((t0, t1));
                        }
                        other => return Err(perr(ln, format!("unknown track kind '{other}'"))),
                    }
                }
                other => return Err(perr(ln, format!("unknown directive '{other}'"))),
            }
            if let Some(extra) = toks.next() {
                return Err(perr(ln, format!("unexpected trailing token '{extra}'")));
            }
        }

        let frames = frames.ok_or_else(|| perr(0, "missing 'frames' directive"))?;
        let (width, height) =
            resolution.ok_or_else(|| perr(0, "missing 'resolution' directive"))?;
        if gaussians.is_empty() {
            return Err(perr(0, "scene has no gaussians"));
        }
        let mut cameras = Vec::new();
        if let Some((count, radius, height_c, focal)) = ring {
            for c in 0..count {
                let theta = 2.0 * std::f64::consts::PI * c as f64 / count as f64;
                let eye = [radius * theta.cos(), height_c, radius * theta.sin()];
                cameras.push(Camera::look_at(eye, [0.0; 3], focal, focal, width, height));
            }
        }
        for (eye, target, focal) in explicit_cams {
            cameras.push(Camera::look_at(eye, target, focal, focal, width, height));
        }
        if cameras.is_empty() {
            return Err(perr(0, "scene has no cameras"));
        }
        Ok(SceneScript {
            frames,
            width,
            height,
            background,
            cameras,
            gaussians,
            tracks,
        })
    }

    /// Ground-truth Gaussians at frame `t`.
    pub fn state_at(&self, t: u32) -> Vec<GaussianPrimitive> {
        self.gaussians
            .iter()
            .zip(&self.tracks)
            .map(|(g, tr)| {
                let mut g = g.clone();
                match &tr.motion {
                    Motion::Static => {}
                    Motion::Linear(v) => {
                        for a in 0..3 {
                            g.mu[a] += v[a] * t as f64;
                        }
                    }
                    Motion::Sine { axis, amp, freq } => {
                        let s = (2.0 * std::f64::consts::PI * freq * t as f64).sin() * amp;
                        for a in 0..3 {
                            g.mu[a] += axis[a] * s;
                        }
                    }
                }
                if let Some((t0, t1)) = tr.vanish {
                    if t >= t0 && t < t1 {
                        g.alpha = 0.0;
                    }
                }
                g
            })
            .collect()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig { background: self.background, ..RenderConfig::default() }
    }

    /// Render frame `t` from camera `cam`.
    pub fn render_frame(&self, t: u32, cam: usize) -> Image {
        render(&self.state_at(t), &self.cameras[cam], &self.render_config())
    }
}

/// Render the whole script to `out_dir` as PPM files plus a manifest.
/// Returns the manifest path. Deterministic: repeat runs are
/// byte-identical.
pub fn generate(script: &SceneScript, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    manifest.push_str("# solar manifest v1\n");
    manifest.push_str(&format!("frames {}\n", script.frames));
    manifest.push_str(&format!("resolution {} {}\n", script.width, script.height));
    manifest.push_str(&format!(
        "background {} {} {}\n",
        script.background[0], script.background[1], script.background[2]
    ));
    for c in &script.cameras {
        manifest.push_str(&format!("camera {} {} {} {}", c.fx, c.fy, c.cx, c.cy));
        for row in &c.rot {
            for v in row {
                manifest.push_str(&format!(" {v}"));
            }
        }
        for v in &c.trans {
            manifest.push_str(&format!(" {v}"));
        }
        for v in &c.view_dir {
            manifest.push_str(&format!(" {v}"));
        }
        manifest.push('\n');
    }
    for t in 0..script.frames {
        for cam in 0..script.cameras.len() {
            let name = format!("frame_{t:04}_cam_{cam}.ppm");
            script.render_frame(t, cam).write_ppm(&out_dir.join(&name))?;
            manifest.push_str(&format!("image {t} {cam} {name}\n"));
        }
    }
    let path = out_dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// A dataset loaded back into memory: `frames[t][cam]`.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub cameras: Vec<Camera>,
    pub frames: Vec<Vec<Image>>,
    pub background: [f64; 3],
}

pub fn load_sequence(manifest_path: &Path) -> Result<LoadedSequence> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut n_frames = None;
    let mut resolution = None;
    let mut background = [0.0; 3];
    let mut cameras: Vec<Camera> = Vec::new();
    let mut images: Vec<(u32, usize, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next().unwrap() {
            "frames" => n_frames = Some(parse_u32(take(&mut toks, ln, "frame count")?, ln)?),
            "resolution" => {
                let w = parse_u32(take(&mut toks, ln, "width")?, ln)? as usize;
                let h = parse_u32(take(&mut toks, ln, "height")?, ln)? as usize;
                resolution = Some((w, h));
            }
            "background" => background = take3(&mut toks, ln, "background")?,
            "camera" => {
                // fx fy cx cy, 9 rotation, 3 translation, 3 view_dir
                let mut v = [0.0; 19];
                for c in &mut v {
                    *c = parse_f64(take(&mut toks, ln, "camera field")?, ln)?;
                }
                let (w, h) = resolution
                    .ok_or_else(|| perr(ln, "camera before 'resolution' directive"))?;
                cameras.push(Camera {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                    rot: [[v[4], v[5], v[6]], [v[7], v[8], v[9]], [v[10], v[11], v[12]]],
                    trans: [v[13], v[14], v[15]],
                    width: w,
                    height: h,
                    view_dir: [v[16], v[17], v[18]],
                });
            }
            "image" => {
                let t = parse_u32(take(&mut toks, ln, "frame index")?, ln)?;
                let cam = parse_u32(take(&mut toks, ln, "camera index")?, ln)? as usize;
                let path = take(&mut toks, ln, "image path")?.to_string();
                images.push((t, cam, path));
            }
            other => return Err(perr(ln, format!("unknown directive '{other}'"))),
        }
    }
    let n_frames = n_frames.ok_or_else(|| perr(0, "missing 'frames' directive"))? as usize;
    let (w, h) = resolution.ok_or_else(|| perr(0, "missing 'resolution' directive"))?;
    if cameras.is_empty() {
        return Err(perr(0, "manifest lists no cameras"));
    }
    let mut frames: Vec<Vec<Option<Image>>> = vec![vec![None; cameras.len()]; n_frames];
    for (t, cam, rel) in images {
        let slot = frames
            .get_mut(t as usize)
            .and_then(|f| f.get_mut(cam))
            .ok_or_else(|| Error::Msg(format!("image entry ({t}, {cam}) out of range")))?;
        let img = Image::read_ppm(&dir.join(&rel))?;
        if img.width != w || img.height != h {
            return Err(Error::Msg(format!(
                "{rel}: resolution {}x{} does not match manifest {w}x{h}",
                img.width, img.height
            )));
        }
        *slot = Some(img);
    }
    let frames = frames
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            f.into_iter()
                .enumerate()
                .map(|(cam, img)| {
                    img.ok_or_else(|| {
                        Error::Msg(format!("manifest missing image for frame {t}, camera {cam}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSequence { cameras, frames, background })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!(
            "solar-synth-{tag}-{}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn builtins_parse() {
        for name in ["static", "drift", "vanish"] {
            let s = SceneScript::builtin(name).unwrap();
            assert!(s.frames > 0);
            assert_eq!(s.cameras.len(), 5);
            assert_eq!(s.gaussians.len(), s.tracks.len());
        }
        assert!(SceneScript::builtin("nope").is_err());
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = "frames 5\nresolution 8 8\ngaussian 0 0 oops";
        match SceneScript::parse(text) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let text = "frames 5\nresolution 8 8\ncameras ring 1 2 0 30\nbogus 1";
        match SceneScript::parse(text) {
            Err(Error::Parse { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn static_scene_frames_are_byte_identical() {
        let mut s = SceneScript::builtin("static").unwrap();
        s.frames = 3;
        s.width = 24;
        s.height = 24;
        for c in &mut s.cameras {
            c.width = 24;
            c.height = 24;
            c.cx = 12.0;
            c.cy = 12.0;
        }
        let dir = temp_dir("static");
        generate(&s, &dir).unwrap();
        let f0 = std::fs::read(dir.join("frame_0000_cam_0.ppm")).unwrap();
        for t in 1..3 {
            let ft = std::fs::read(dir.join(format!("frame_{t:04}_cam_0.ppm"))).unwrap();
            assert_eq!(f0, ft);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn generate_is_deterministic() {
        let mut s = SceneScript::builtin("drift").unwrap();
        s.frames = 2;
        let (d1, d2) = (temp_dir("det1"), temp_dir("det2"));
        generate(&s, &d1).unwrap();
        generate(&s, &d2).unwrap();
        for t in 0..2 {
            for c in 0..5 {
                let name = format!("frame_{t:04}_cam_{c}.ppm");
                assert_eq!(
                    std::fs::read(d1.join(&name)).unwrap(),
                    std::fs::read(d2.join(&name)).unwrap()
                );
            }
        }
        let _ = std::fs::remove_dir_all(&d1);
        let _ = std::fs::remove_dir_all(&d2);
    }

    #[test]
    fn linear_track_shifts_projected_centroid() {
        // one gaussian drifting along +x, camera on -z looking at origin
        let text = "\
frames 12
resolution 40 40
camera 0 0 -2   0 0 0   40
gaussian 0 0 0   0.2 0.2 0.2   1 0 0 0   1 1 1   0.9
track 0 linear 0.01 0 0
";
        let s = SceneScript::parse(text).unwrap();
        let centroid_x = |img: &Image| {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = img.at(x, y).iter().sum::<f64>();
                    num += v * (x as f64 + 0.5);
                    den += v;
                }
            }
            num / den
        };
        let c0 = centroid_x(&s.render_frame(0, 0));
        let c10 = centroid_x(&s.render_frame(10, 0));
        // pinhole: Δpx ≈ fx·Δx/depth = 40·0.1/2 = 2.0.  The drift is
        // toward -x in pixel space or +x depending on camera handedness;
        // magnitude is what the pinhole model pins down.
        assert!(
            ((c10 - c0).abs() - 2.0).abs() < 0.25,
            "centroid moved {} px, expected ~2.0",
            c10 - c0
        );
    }

    #[test]
    fn vanish_interval_matches_render_without_oracle() {
        let mut s = SceneScript::builtin("vanish").unwrap();
        s.width = 24;
        s.height = 24;
        for c in &mut s.cameras {
            c.width = 24;
            c.height = 24;
            c.cx = 12.0;
            c.cy = 12.0;
        }
        let mut without = s.clone();
        without.gaussians.remove(2);
        without.tracks.remove(2);
        for t in [20u32, 30, 39] {
            for cam in 0..s.cameras.len() {
                assert_eq!(
                    s.render_frame(t, cam).pixels,
                    without.render_frame(t, cam).pixels,
                    "frame {t} cam {cam}"
                );
            }
        }
        // outside the interval the gaussian is visible again
        assert_ne!(s.render_frame(40, 0).pixels, without.render_frame(40, 0).pixels);
        assert_ne!(s.render_frame(19, 0).pixels, without.render_frame(19, 0).pixels);
    }

    #[test]
    fn generate_load_round_trip_is_pixel_identical() {
        let mut s = SceneScript::builtin("vanish").unwrap();
        s.frames = 3;
        s.width = 16;
        s.height = 16;
        for c in &mut s.cameras {
            c.width = 16;
            c.height = 16;
            c.cx = 8.0;
            c.cy = 8.0;
        }
        let dir = temp_dir("roundtrip");
        let manifest = generate(&s, &dir).unwrap();
        let seq = load_sequence(&manifest).unwrap();
        assert_eq!(seq.cameras.len(), 5);
        assert_eq!(seq.frames.len(), 3);
        assert_eq!(seq.background, s.background);
        for c in 0..5 {
            assert_eq!(seq.cameras[c], s.cameras[c]);
        }
        for t in 0..3u32 {
            for c in 0..5 {
                let direct =
                    Image::read_ppm(&dir.join(format!("frame_{t:04}_cam_{c}.ppm"))).unwrap();
                assert_eq!(seq.frames[t as usize][c].pixels, direct.pixels);
            }
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_image_error_names_the_path() {
        let mut s = SceneScript::builtin("static").unwrap();
        s.frames = 1;
        s.width = 8;
        s.height = 8;
        for c in &mut s.cameras {
            c.width = 8;
            c.height = 8;
            c.cx = 4.0;
            c.cy = 4.0;
        }
        let dir = temp_dir("missing");
        let manifest = generate(&s, &dir).unwrap();
        std::fs::remove_file(dir.join("frame_0000_cam_2.ppm")).unwrap();
        match load_sequence(&manifest) {
            Err(Error::Io { path, .. }) => assert!(path.contains("frame_0000_cam_2.ppm")),
            other => panic!("unexpected {other:?}"),
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn hand_written_manifest_loads() {
        let dir = temp_dir("hand");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = Image::new(4, 4);
        img.pixels[0] = 1.0;
        img.write_ppm(&dir.join("a.ppm")).unwrap();
        img.write_ppm(&dir.join("b.ppm")).unwrap();
        let manifest = dir.join("manifest.txt");
        std::fs::write(
            &manifest,
            "frames 2\nresolution 4 4\n\
             camera 10 10 2 2  1 0 0  0 1 0  0 0 1  0 0 0  0 0 -1\n\
             image 0 0 a.ppm\nimage 1 0 b.ppm\n",
        )
        .unwrap();
        let seq = load_sequence(&manifest).unwrap();
        assert_eq!(seq.frames.len(), 2);
        assert_eq!(seq.cameras[0].fx, 10.0);
        assert!((seq.frames[0][0].pixels[0] - 1.0).abs() < 1.0 / 255.0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let dir = temp_dir("res");
        std::fs::create_dir_all(&dir).unwrap();
        Image::new(4, 4).write_ppm(&dir.join("a.ppm")).unwrap();
        let manifest = dir.join("manifest.txt");
        std::fs::write(
            &manifest,
            "frames 1\nresolution 8 8\n\
             camera 10 10 4 4  1 0 0  0 1 0  0 0 1  0 0 0  0 0 -1\n\
             image 0 0 a.ppm\n",
        )
        .unwrap();
        match load_sequence(&manifest) {
            Err(Error::Msg(m)) => assert!(m.contains("resolution")),
            other => panic!("unexpected {other:?}"),
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
