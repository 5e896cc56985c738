//! Differentiable rendering of 3D Gaussians: pinhole projection with
//! EWA-style covariance propagation and depth-sorted alpha compositing,
//! plus analytic gradients w.r.t. every primitive attribute.
//!
//! Per-pixel math keeps a fixed summation order so renders are
//! bit-identical across runs and processes; the codec's parity contract
//! depends on that.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// One renderable Gaussian. `rot` is a unit quaternion in (w, x, y, z)
/// order; callers normalize before handing primitives to the renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub s: [f64; 3],
    pub rot: [f64; 4],
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Gradients w.r.t. all attributes of one Gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianGrad {
    pub mu: [f64; 3],
    pub s: [f64; 3],
    pub rot: [f64; 4],
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Pinhole camera. `rot`/`trans` map world to camera coordinates;
/// `view_dir` is the unit direction used by the attribute network.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub view_dir: [f64; 3],
}

impl Camera {
    /// Camera center in world coordinates: -Rᵀ t.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rot;
        let t = &self.trans;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Build a camera at `eye` looking at `target` (up = +y), with the
    /// view direction pointing from `target` toward `eye`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let fwd = norm3([
            target[0] - eye[0],
            target[1] - eye[1],
            target[2] - eye[2],
        ]);
        let up = [0.0, 1.0, 0.0];
        let mut right = cross(fwd, up);
        if dot3(right, right) < 1e-12 {
            right = cross(fwd, [1.0, 0.0, 0.0]);
        }
        let right = norm3(right);
        let down = cross(fwd, right);
        // rows: x right, y down, z forward (camera looks along +z)
        let rot = [right, down, fwd];
        let trans = [
            -dot3(rot[0], eye),
            -dot3(rot[1], eye),
            -dot3(rot[2], eye),
        ];
        let view_dir = norm3([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rot,
            trans,
            width,
            height,
            view_dir,
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt().max(1e-12);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// RGB image, row-major, values nominally in [0,1] (clamped only at export).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for v in &self.pixels {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let err = |msg: &str| Error::Bitstream(format!("{}: {msg}", path.display()));
        let mut pos = 0usize;
        let mut token = |data: &[u8]| -> Result<String> {
            while pos < data.len() && (data[pos] as char).is_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !(data[pos] as char).is_whitespace() {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };
        if token(&data)? != "P6" {
            return Err(err("not a P6 ppm"));
        }
        let width: usize = token(&data)?.parse().map_err(|_| err("bad width"))?;
        let height: usize = token(&data)?.parse().map_err(|_| err("bad height"))?;
        let maxv: usize = token(&data)?.parse().map_err(|_| err("bad maxval"))?;
        if maxv != 255 {
            return Err(err("only 8-bit ppm supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if data.len() < pos + need {
            return Err(err("truncated pixel data"));
        }
        let pixels = data[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { width, height, pixels })
    }

    /// 32-bit float PFM (color, little-endian), for loss-grade comparisons.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(f);
        let hdr = format!("PF\n{} {}\n-1.0\n", self.width, self.height);
        let mut res: std::io::Result<()> = w.write_all(hdr.as_bytes());
        // PFM scanlines run bottom-to-top
        if res.is_ok() {
            'rows: for y in (0..self.height).rev() {
                for x in 0..self.width {
                    for c in self.at(x, y) {
                        if let Err(e) = w.write_all(&(c as f32).to_le_bytes()) {
                            res = Err(e);
                            break 'rows;
                        }
                    }
                }
            }
        }
        res.map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_pfm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut data = Vec::new();
        std::io::BufReader::new(f)
            .read_to_end(&mut data)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let err = |msg: &str| Error::Bitstream(format!("{}: {msg}", path.display()));
        let text = String::from_utf8_lossy(&data[..data.len().min(64)]);
        let mut lines = text.splitn(4, '\n');
        if lines.next() != Some("PF") {
            return Err(err("not a color pfm"));
        }
        let dims = lines.next().ok_or_else(|| err("missing dims"))?;
        let mut it = dims.split_whitespace();
        let width: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad width"))?;
        let height: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad height"))?;
        let scale_line = lines.next().ok_or_else(|| err("missing scale"))?;
        let scale: f64 = scale_line.trim().parse().map_err(|_| err("bad scale"))?;
        if scale >= 0.0 {
            return Err(err("big-endian pfm unsupported"));
        }
        let header_len = 3 + dims.len() + 1 + scale_line.len() + 1;
        let need = width * height * 3 * 4;
        if data.len() < header_len + need {
            return Err(err("truncated pixel data"));
        }
        let mut img = Image::new(width, height);
        let mut pos = header_len;
        for y in (0..height).rev() {
            for x in 0..width {
                for c in 0..3 {
                    let b = [data[pos], data[pos + 1], data[pos + 2], data[pos + 3]];
                    img.pixels[(y * width + x) * 3 + c] = f32::from_le_bytes(b) as f64;
                    pos += 4;
                }
            }
        }
        Ok(img)
    }
}

/// Rasterizer knobs.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Diagonal floor on the projected covariance, in px².
    pub eps_cov: f64,
    /// Contributions below this weight are skipped (and get zero gradient).
    pub w_min: f64,
    /// Support radius in standard deviations of the projected Gaussian.
    pub sigma_cut: f64,
    pub background: [f64; 3],
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            eps_cov: 0.3,
            w_min: 1.0 / 255.0,
            sigma_cut: 3.0,
            background: [0.0, 0.0, 0.0],
            near: 0.01,
        }
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rot(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// dL/dq given dL/dR for the unit-quaternion rotation formula.
fn quat_rot_backward(q: [f64; 4], dr: &[[f64; 3]; 3]) -> [f64; 4] {
    let [w, x, y, z] = q;
    // dR/dw
    let dw = [
        [0.0, -2.0 * z, 2.0 * y],
        [2.0 * z, 0.0, -2.0 * x],
        [-2.0 * y, 2.0 * x, 0.0],
    ];
    let dx = [
        [0.0, 2.0 * y, 2.0 * z],
        [2.0 * y, -4.0 * x, -2.0 * w],
        [2.0 * z, 2.0 * w, -4.0 * x],
    ];
    let dy = [
        [-4.0 * y, 2.0 * x, 2.0 * w],
        [2.0 * x, 0.0, 2.0 * z],
        [-2.0 * w, 2.0 * z, -4.0 * y],
    ];
    let dz = [
        [-4.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * w, -4.0 * z, 2.0 * y],
        [2.0 * x, 2.0 * y, 0.0],
    ];
    let contract = |d: &[[f64; 3]; 3]| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += d[i][j] * dr[i][j];
            }
        }
        acc
    };
    [contract(&dw), contract(&dx), contract(&dy), contract(&dz)]
}

/// Projection of one Gaussian: 2D mean (pixels), 2D covariance, camera depth.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub mu2d: [f64; 2],
    pub cov2d: [f64; 3], // (a, b, c) of [[a,b],[b,c]]
    pub depth: f64,
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Project a Gaussian. Returns `None` for Gaussians behind the near plane
/// (culled, not an error).
pub fn project(g: &GaussianPrimitive, cam: &Camera, cfg: &RenderConfig) -> Option<Projected> {
    let r = &cam.rot;
    let p = [
        r[0][0] * g.mu[0] + r[0][1] * g.mu[1] + r[0][2] * g.mu[2] + cam.trans[0],
        r[1][0] * g.mu[0] + r[1][1] * g.mu[1] + r[1][2] * g.mu[2] + cam.trans[1],
        r[2][0] * g.mu[0] + r[2][1] * g.mu[1] + r[2][2] * g.mu[2] + cam.trans[2],
    ];
    if p[2] <= cfg.near {
        return None;
    }
    let (x, y, z) = (p[0], p[1], p[2]);
    let mu2d = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];

    let rg = quat_to_rot(g.rot);
    // Sigma = R diag(s^2) R^T
    let mut sig = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                sig[i][j] += rg[i][k] * g.s[k] * g.s[k] * rg[j][k];
            }
        }
    }
    let w_sig_wt = {
        let rw = [
            [r[0][0], r[0][1], r[0][2]],
            [r[1][0], r[1][1], r[1][2]],
            [r[2][0], r[2][1], r[2][2]],
        ];
        let tmp = mat3_mul(&rw, &sig);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += tmp[i][k] * rw[j][k];
                }
            }
        }
        out
    };
    // J = pinhole Jacobian at the camera-frame mean
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let mut cov = [0.0; 3]; // a, b, c
    let mut jc = [[0.0; 3]; 2];
    for i in 0..2 {
        for kk in 0..3 {
            for m in 0..3 {
                jc[i][kk] += j[i][m] * w_sig_wt[m][kk];
            }
        }
    }
    let a = jc[0][0] * j[0][0] + jc[0][1] * j[0][1] + jc[0][2] * j[0][2];
    let b = jc[0][0] * j[1][0] + jc[0][1] * j[1][1] + jc[0][2] * j[1][2];
    let c = jc[1][0] * j[1][0] + jc[1][1] * j[1][1] + jc[1][2] * j[1][2];
    cov[0] = a + cfg.eps_cov;
    cov[1] = b;
    cov[2] = c + cfg.eps_cov;
    Some(Projected { mu2d, cov2d: cov, depth: z })
}

/// Value of the projected 2D Gaussian at pixel center `p`.
pub fn eval_gaussian_2d(mu2d: [f64; 2], cov2d: [f64; 3], p: [f64; 2]) -> f64 {
    let [a, b, c] = cov2d;
    let det = a * c - b * b;
    let dx = p[0] - mu2d[0];
    let dy = p[1] - mu2d[1];
    // inverse of [[a,b],[b,c]]
    let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    (-0.5 * q).exp()
}

struct Splat {
    idx: usize,
    mu2d: [f64; 2],
    inv: [f64; 3], // inverse covariance (ia, ib, ic)
    bbox: [usize; 4],
    depth: f64,
    color: [f64; 3],
    alpha: f64,
}

fn prepare(gaussians: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> Vec<Splat> {
    let mut splats = Vec::new();
    for (idx, g) in gaussians.iter().enumerate() {
        let Some(pr) = project(g, cam, cfg) else { continue };
        let [a, b, c] = pr.cov2d;
        let det = a * c - b * b;
        if det <= 0.0 {
            continue;
        }
        let inv = [c / det, -b / det, a / det];
        let lam_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let radius = cfg.sigma_cut * lam_max.sqrt();
        let x0 = (pr.mu2d[0] - radius).floor().max(0.0) as usize;
        let y0 = (pr.mu2d[1] - radius).floor().max(0.0) as usize;
        let x1 = ((pr.mu2d[0] + radius).ceil() as isize).clamp(0, cam.width as isize) as usize;
        let y1 = ((pr.mu2d[1] + radius).ceil() as isize).clamp(0, cam.height as isize) as usize;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        splats.push(Splat {
            idx,
            mu2d: pr.mu2d,
            inv,
            bbox: [x0, x1, y0, y1],
            depth: pr.depth,
            color: g.color,
            alpha: g.alpha,
        });
    }
    // increasing depth, ties by input index (stable by construction)
    splats.sort_by(|p, q| p.depth.partial_cmp(&q.depth).unwrap());
    splats
}

/// Render to an image by front-to-back alpha compositing.
pub fn render(gaussians: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> Image {
    let splats = prepare(gaussians, cam, cfg);
    let mut img = Image::new(cam.width, cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            let mut t = 1.0;
            let mut col = [0.0; 3];
            for sp in &splats {
                if px < sp.bbox[0] || px >= sp.bbox[1] || py < sp.bbox[2] || py >= sp.bbox[3] {
                    continue;
                }
                let dx = p[0] - sp.mu2d[0];
                let dy = p[1] - sp.mu2d[1];
                let q = sp.inv[0] * dx * dx + 2.0 * sp.inv[1] * dx * dy + sp.inv[2] * dy * dy;
                let g = (-0.5 * q).exp();
                let w = sp.alpha * g;
                if w < cfg.w_min {
                    continue;
                }
                for ch in 0..3 {
                    col[ch] += sp.color[ch] * w * t;
                }
                t *= 1.0 - w;
            }
            let i = (py * cam.width + px) * 3;
            for ch in 0..3 {
                img.pixels[i + ch] = col[ch] + cfg.background[ch] * t;
            }
        }
    }
    img
}

/// Analytic gradients w.r.t. every attribute of every input Gaussian given
/// dL/dImage. Culled and skipped contributions receive zero gradient.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    cam: &Camera,
    cfg: &RenderConfig,
    d_image: &Image,
) -> Vec<GaussianGrad> {
    assert_eq!(d_image.width, cam.width);
    assert_eq!(d_image.height, cam.height);
    let splats = prepare(gaussians, cam, cfg);
    let mut grads = vec![GaussianGrad::default(); gaussians.len()];
    // per-splat accumulated gradients in projected space
    let mut d_mu2d = vec![[0.0f64; 2]; splats.len()];
    let mut d_cov = vec![[0.0f64; 3]; splats.len()]; // w.r.t. (a, b, c)

    struct Contrib {
        si: usize,
        w: f64,
        g: f64,
        t: f64,
        dx: f64,
        dy: f64,
    }
    let mut stack: Vec<Contrib> = Vec::new();

    for py in 0..cam.height {
        for px in 0..cam.width {
            let i = (py * cam.width + px) * 3;
            let dl = [d_image.pixels[i], d_image.pixels[i + 1], d_image.pixels[i + 2]];
            if dl == [0.0, 0.0, 0.0] {
                continue;
            }
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            stack.clear();
            let mut t = 1.0;
            for (si, sp) in splats.iter().enumerate() {
                if px < sp.bbox[0] || px >= sp.bbox[1] || py < sp.bbox[2] || py >= sp.bbox[3] {
                    continue;
                }
                let dx = p[0] - sp.mu2d[0];
                let dy = p[1] - sp.mu2d[1];
                let q = sp.inv[0] * dx * dx + 2.0 * sp.inv[1] * dx * dy + sp.inv[2] * dy * dy;
                let g = (-0.5 * q).exp();
                let w = sp.alpha * g;
                if w < cfg.w_min {
                    continue;
                }
                stack.push(Contrib { si, w, g, t, dx, dy });
                t *= 1.0 - w;
            }
            // background through residual transmittance:
            // dL/dw_i picks up -bg * T_end / (1 - w_i) as part of the suffix.
            let mut suffix = 0.0;
            for ch in 0..3 {
                suffix += dl[ch] * cfg.background[ch] * t;
            }
            for cb in stack.iter().rev() {
                let sp = &splats[cb.si];
                let cd = dl[0] * sp.color[0] + dl[1] * sp.color[1] + dl[2] * sp.color[2];
                let dw = if 1.0 - cb.w > 1e-12 {
                    cd * cb.t - suffix / (1.0 - cb.w)
                } else {
                    cd * cb.t
                };
                suffix += cd * cb.w * cb.t;

                let gout = &mut grads[sp.idx];
                for ch in 0..3 {
                    gout.color[ch] += dl[ch] * cb.w * cb.t;
                }
                gout.alpha += dw * cb.g;
                let dg = dw * sp.alpha;
                // g = exp(-0.5 d^T A d) with A = inv covariance, d = p - mu2d
                let adx = sp.inv[0] * cb.dx + sp.inv[1] * cb.dy;
                let ady = sp.inv[1] * cb.dx + sp.inv[2] * cb.dy;
                let dgd = [-cb.g * adx, -cb.g * ady]; // d g / d d
                d_mu2d[cb.si][0] -= dg * dgd[0];
                d_mu2d[cb.si][1] -= dg * dgd[1];
                // d g / d A = -0.5 g d d^T ; d A / d cov = -A dCov A
                // => d g / d cov = 0.5 g (A d)(A d)^T
                let f = 0.5 * cb.g * dg;
                d_cov[cb.si][0] += f * adx * adx;
                d_cov[cb.si][1] += f * 2.0 * adx * ady;
                d_cov[cb.si][2] += f * ady * ady;
            }
        }
    }

    // chain projected-space gradients back to 3D attributes
    for (si, sp) in splats.iter().enumerate() {
        let g = &gaussians[sp.idx];
        let gout = &mut grads[sp.idx];
        backprop_projection(g, cam, d_mu2d[si], d_cov[si], gout);
    }
    grads
}

/// Chain dL/d(mu2d), dL/d(cov2d) back to dL/d(mu, s, rot).
fn backprop_projection(
    g: &GaussianPrimitive,
    cam: &Camera,
    d_mu2d: [f64; 2],
    d_cov: [f64; 3],
    out: &mut GaussianGrad,
) {
    let r = &cam.rot;
    let p = [
        r[0][0] * g.mu[0] + r[0][1] * g.mu[1] + r[0][2] * g.mu[2] + cam.trans[0],
        r[1][0] * g.mu[0] + r[1][1] * g.mu[1] + r[1][2] * g.mu[2] + cam.trans[1],
        r[2][0] * g.mu[0] + r[2][1] * g.mu[1] + r[2][2] * g.mu[2] + cam.trans[2],
    ];
    let (x, y, z) = (p[0], p[1], p[2]);

    let rg = quat_to_rot(g.rot);
    let mut sig = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            for k in 0..3 {
                sig[i][jj] += rg[i][k] * g.s[k] * g.s[k] * rg[jj][k];
            }
        }
    }
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    // M = J W (2x3)
    let mut m = [[0.0; 3]; 2];
    for i in 0..2 {
        for jj in 0..3 {
            for k in 0..3 {
                m[i][jj] += j[i][k] * r[k][jj];
            }
        }
    }
    // dC as symmetric 2x2
    let dc = [[d_cov[0], 0.5 * d_cov[1]], [0.5 * d_cov[1], d_cov[2]]];
    // dSigma = M^T dC M
    let mut d_sig = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    d_sig[i][jj] += m[a][i] * dc[a][b] * m[b][jj];
                }
            }
        }
    }
    // dM = 2 dC M Sigma  (dC symmetric)
    let mut ms = [[0.0; 3]; 2];
    for a in 0..2 {
        for jj in 0..3 {
            for k in 0..3 {
                ms[a][jj] += m[a][k] * sig[k][jj];
            }
        }
    }
    let mut d_m = [[0.0; 3]; 2];
    for a in 0..2 {
        for jj in 0..3 {
            for b in 0..2 {
                d_m[a][jj] += 2.0 * dc[a][b] * ms[b][jj];
            }
        }
    }
    // dJ = dM W^T
    let mut d_j = [[0.0; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            for jj in 0..3 {
                d_j[a][k] += d_m[a][jj] * r[k][jj];
            }
        }
    }

    // gradients into camera-space mean via mu2d and J
    let mut dp = [0.0; 3];
    dp[0] += d_mu2d[0] * cam.fx / z;
    dp[1] += d_mu2d[1] * cam.fy / z;
    dp[2] += -d_mu2d[0] * cam.fx * x / (z * z) - d_mu2d[1] * cam.fy * y / (z * z);
    // J entries: J00=fx/z, J02=-fx x/z^2, J11=fy/z, J12=-fy y/z^2
    dp[2] += d_j[0][0] * (-cam.fx / (z * z));
    dp[0] += d_j[0][2] * (-cam.fx / (z * z));
    dp[2] += d_j[0][2] * (2.0 * cam.fx * x / (z * z * z));
    dp[2] += d_j[1][1] * (-cam.fy / (z * z));
    dp[1] += d_j[1][2] * (-cam.fy / (z * z));
    dp[2] += d_j[1][2] * (2.0 * cam.fy * y / (z * z * z));
    // world mean: dmu = W^T dp
    for i in 0..3 {
        out.mu[i] += r[0][i] * dp[0] + r[1][i] * dp[1] + r[2][i] * dp[2];
    }

    // Sigma = Rg diag(s^2) Rg^T
    // dRg = 2 dSigma Rg D (dSigma symmetric), dD = Rg^T dSigma Rg
    let mut d_rg = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            let mut acc = 0.0;
            for jj in 0..3 {
                acc += d_sig[i][jj] * rg[jj][k];
            }
            d_rg[i][k] = 2.0 * acc * g.s[k] * g.s[k];
        }
    }
    for k in 0..3 {
        let mut dd = 0.0;
        for i in 0..3 {
            for jj in 0..3 {
                dd += rg[i][k] * d_sig[i][jj] * rg[jj][k];
            }
        }
        out.s[k] += dd * 2.0 * g.s[k];
    }
    let dq = quat_rot_backward(g.rot, &d_rg);
    for i in 0..4 {
        out.rot[i] += dq[i];
    }
}
