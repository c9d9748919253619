//! Triplane latent codecs.
//!
//! The latent is z = [z^s, z^h, z^w]: a content plane over the spatial patch
//! grid and two temporal planes over (T, H/P) and (T, W/P), flattened to a
//! C' x L matrix. Two codecs share this layout contract:
//!
//! * [`TestCodec`]: a deterministic invertible linear map (fixed-seed
//!   orthonormal channel mixing per plane on top of a pixel scatter). Used by
//!   unit and property tests and by desk-scale diffusion training, since
//!   decode(encode(x)) = x exactly.
//! * [`TrainableCodec`]: a small encoder/decoder trained with reconstruction
//!   loss only. Per-plane features are pooled over the complementary axes
//!   before projection, decoding recombines the three plane vectors per
//!   spatio-temporal patch.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opt::Adam;
use crate::tensor::{Graph, Id, Mat};
use crate::video::{Modality, Role, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub c_prime: usize,
    /// content plane tokens: (H/P)(W/P)
    pub n_s: usize,
    /// height-temporal plane tokens: T*(H/P)
    pub n_h: usize,
    /// width-temporal plane tokens: T*(W/P)
    pub n_w: usize,
    /// flattened token count: n_s + n_h + n_w
    pub l: usize,
}

/// Plane shapes and flattened length for a given geometry.
pub fn latent_layout(t: usize, h: usize, w: usize, patch: usize, c_prime: usize) -> Result<LatentLayout> {
    if t < 1 {
        return Err(Error::InvalidGeometry("T must be >= 1".into()));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidGeometry(format!(
            "H={} and W={} must be divisible by patch size {}",
            h, w, patch
        )));
    }
    if c_prime < 1 {
        return Err(Error::InvalidGeometry("C' must be >= 1".into()));
    }
    let hp = h / patch;
    let wp = w / patch;
    let n_s = hp * wp;
    let n_h = t * hp;
    let n_w = t * wp;
    Ok(LatentLayout { t, h, w, patch, c_prime, n_s, n_h, n_w, l: n_s + n_h + n_w })
}

/// The diffusion state: three planes, each C' x tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriplaneLatent {
    pub layout: LatentLayout,
    pub z_s: Mat,
    pub z_h: Mat,
    pub z_w: Mat,
}

impl TriplaneLatent {
    pub fn zeros(layout: LatentLayout) -> Self {
        TriplaneLatent {
            layout,
            z_s: Mat::zeros(layout.c_prime, layout.n_s),
            z_h: Mat::zeros(layout.c_prime, layout.n_h),
            z_w: Mat::zeros(layout.c_prime, layout.n_w),
        }
    }

    /// Flattened C' x L view (planes concatenated along the token axis).
    pub fn flat(&self) -> Mat {
        let c = self.layout.c_prime;
        let l = self.layout.l;
        let mut out = Mat::zeros(c, l);
        for i in 0..c {
            let o = i * l;
            out.data[o..o + self.layout.n_s]
                .copy_from_slice(&self.z_s.data[i * self.layout.n_s..(i + 1) * self.layout.n_s]);
            out.data[o + self.layout.n_s..o + self.layout.n_s + self.layout.n_h]
                .copy_from_slice(&self.z_h.data[i * self.layout.n_h..(i + 1) * self.layout.n_h]);
            out.data[o + self.layout.n_s + self.layout.n_h..o + l]
                .copy_from_slice(&self.z_w.data[i * self.layout.n_w..(i + 1) * self.layout.n_w]);
        }
        out
    }

    pub fn from_flat(layout: LatentLayout, flat: &Mat) -> Result<Self> {
        if flat.rows != layout.c_prime || flat.cols != layout.l {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} latent, got {}x{}",
                layout.c_prime, layout.l, flat.rows, flat.cols
            )));
        }
        let mut z = TriplaneLatent::zeros(layout);
        for i in 0..layout.c_prime {
            let o = i * layout.l;
            z.z_s.data[i * layout.n_s..(i + 1) * layout.n_s]
                .copy_from_slice(&flat.data[o..o + layout.n_s]);
            z.z_h.data[i * layout.n_h..(i + 1) * layout.n_h]
                .copy_from_slice(&flat.data[o + layout.n_s..o + layout.n_s + layout.n_h]);
            z.z_w.data[i * layout.n_w..(i + 1) * layout.n_w]
                .copy_from_slice(&flat.data[o + layout.n_s + layout.n_h..o + layout.l]);
        }
        Ok(z)
    }

    pub fn is_finite(&self) -> bool {
        !self.z_s.has_nan() && !self.z_h.has_nan() && !self.z_w.has_nan()
    }
}

fn orthonormal(n: usize, rng: &mut ChaCha12Rng) -> Mat {
    // Gram-Schmidt with one re-orthogonalization pass.
    let mut q = Mat::randn(n, n, 1.0, rng);
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| q.get(i, k) * q.get(j, k)).sum();
                for k in 0..n {
                    let v = q.get(i, k) - dot * q.get(j, k);
                    q.set(i, k, v);
                }
            }
        }
        let norm: f64 = (0..n).map(|k| q.get(i, k) * q.get(i, k)).sum::<f64>().sqrt();
        for k in 0..n {
            q.set(i, k, q.get(i, k) / norm);
        }
    }
    q
}

/// Deterministic invertible codec: pixels are scattered into the flattened
/// latent (padding the tail with zeros), then each plane's channels are mixed
/// by a fixed-seed orthonormal matrix. decode . encode is exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestCodec {
    pub layout: LatentLayout,
    pub channels: usize,
    pub seed: u64,
    mix_s: Mat,
    mix_h: Mat,
    mix_w: Mat,
}

impl TestCodec {
    /// C' is chosen as the smallest value with C'*L >= T*H*W*C so the scatter
    /// is injective and exactly invertible.
    pub fn new(t: usize, h: usize, w: usize, c: usize, patch: usize, seed: u64) -> Result<Self> {
        let base = latent_layout(t, h, w, patch, 1)?;
        let pixels = t * h * w * c;
        let c_prime = pixels.div_ceil(base.l);
        let layout = latent_layout(t, h, w, patch, c_prime)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mix_s = orthonormal(c_prime, &mut rng);
        let mix_h = orthonormal(c_prime, &mut rng);
        let mix_w = orthonormal(c_prime, &mut rng);
        Ok(TestCodec { layout, channels: c, seed, mix_s, mix_h, mix_w })
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.t != self.layout.t
            || clip.h != self.layout.h
            || clip.w != self.layout.w
            || clip.c != self.channels
        {
            return Err(Error::InvalidGeometry(format!(
                "clip {}x{}x{}x{} incompatible with codec geometry {}x{}x{}x{}",
                clip.t, clip.h, clip.w, clip.c, self.layout.t, self.layout.h, self.layout.w, self.channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<TriplaneLatent> {
        self.check_clip(clip)?;
        let lay = self.layout;
        let mut raw = Mat::zeros(lay.c_prime, lay.l);
        // column-major scatter so every plane receives pixels
        for (p, &v) in clip.data.iter().enumerate() {
            let col = p % lay.l;
            let row = p / lay.l;
            raw.set(row, col, v);
        }
        let z = TriplaneLatent::from_flat(lay, &raw)?;
        Ok(TriplaneLatent {
            layout: lay,
            z_s: self.mix_s.matmul(&z.z_s),
            z_h: self.mix_h.matmul(&z.z_h),
            z_w: self.mix_w.matmul(&z.z_w),
        })
    }

    pub fn decode(&self, latent: &TriplaneLatent) -> Result<VideoClip> {
        if latent.layout != self.layout {
            return Err(Error::InvalidGeometry("latent layout mismatch".into()));
        }
        let lay = self.layout;
        let raw = TriplaneLatent {
            layout: lay,
            z_s: self.mix_s.transpose().matmul(&latent.z_s),
            z_h: self.mix_h.transpose().matmul(&latent.z_h),
            z_w: self.mix_w.transpose().matmul(&latent.z_w),
        };
        let flat = raw.flat();
        let mut clip = VideoClip::zeros(lay.t, lay.h, lay.w, self.channels, Modality::A, Role::Target);
        for p in 0..clip.data.len() {
            let col = p % lay.l;
            let row = p / lay.l;
            clip.data[p] = flat.get(row, col).clamp(-1.0, 1.0);
        }
        Ok(clip)
    }
}

/// Trainable codec parameters. Hidden width defaults to 32 (desk scale).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainableCodec {
    pub layout: LatentLayout,
    pub channels: usize,
    pub hidden: usize,
    /// latent normalization factor: encode divides by it, decode multiplies.
    /// Set after fitting so encoded latents have unit RMS over the train set.
    #[serde(default = "unit_scale")]
    pub lat_scale: f64,
    // encoder: per-plane pooled features -> C' channels
    enc_s1: Mat,
    enc_s1b: Mat,
    enc_s2: Mat,
    enc_s2b: Mat,
    enc_s_skip: Mat,
    enc_h1: Mat,
    enc_h1b: Mat,
    enc_h2: Mat,
    enc_h2b: Mat,
    enc_h_skip: Mat,
    enc_w1: Mat,
    enc_w1b: Mat,
    enc_w2: Mat,
    enc_w2b: Mat,
    enc_w_skip: Mat,
    // decoder: [z_s; z_h; z_w] per patch -> P*P*C pixels
    dec1: Mat,
    dec1b: Mat,
    dec2: Mat,
    dec2b: Mat,
    dec_skip: Mat,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainableCodec {
    pub fn new(
        t: usize,
        h: usize,
        w: usize,
        c: usize,
        patch: usize,
        c_prime: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let layout = latent_layout(t, h, w, patch, c_prime)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let p2c = patch * patch * c;
        let pc = patch * c;
        let d_in = 3 * c_prime;
        let s = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(TrainableCodec {
            layout,
            channels: c,
            hidden,
            lat_scale: 1.0,
            enc_s1: Mat::randn(hidden, p2c, s(p2c), &mut rng),
            enc_s1b: Mat::zeros(hidden, 1),
            enc_s2: Mat::randn(c_prime, hidden, s(hidden), &mut rng),
            enc_s2b: Mat::zeros(c_prime, 1),
            enc_s_skip: Mat::randn(c_prime, p2c, s(p2c), &mut rng),
            enc_h1: Mat::randn(hidden, pc, s(pc), &mut rng),
            enc_h1b: Mat::zeros(hidden, 1),
            enc_h2: Mat::randn(c_prime, hidden, s(hidden), &mut rng),
            enc_h2b: Mat::zeros(c_prime, 1),
            enc_h_skip: Mat::randn(c_prime, pc, s(pc), &mut rng),
            enc_w1: Mat::randn(hidden, pc, s(pc), &mut rng),
            enc_w1b: Mat::zeros(hidden, 1),
            enc_w2: Mat::randn(c_prime, hidden, s(hidden), &mut rng),
            enc_w2b: Mat::zeros(c_prime, 1),
            enc_w_skip: Mat::randn(c_prime, pc, s(pc), &mut rng),
            dec1: Mat::randn(hidden, d_in, s(d_in), &mut rng),
            dec1b: Mat::zeros(hidden, 1),
            dec2: Mat::randn(p2c, hidden, s(hidden), &mut rng),
            dec2b: Mat::zeros(p2c, 1),
            dec_skip: Mat::randn(p2c, d_in, s(d_in), &mut rng),
        })
    }

    pub fn params(&self) -> Vec<&Mat> {
        vec![
            &self.enc_s1, &self.enc_s1b, &self.enc_s2, &self.enc_s2b, &self.enc_s_skip,
            &self.enc_h1, &self.enc_h1b, &self.enc_h2, &self.enc_h2b, &self.enc_h_skip,
            &self.enc_w1, &self.enc_w1b, &self.enc_w2, &self.enc_w2b, &self.enc_w_skip,
            &self.dec1, &self.dec1b, &self.dec2, &self.dec2b, &self.dec_skip,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.enc_s1, &mut self.enc_s1b, &mut self.enc_s2, &mut self.enc_s2b,
            &mut self.enc_s_skip, &mut self.enc_h1, &mut self.enc_h1b, &mut self.enc_h2,
            &mut self.enc_h2b, &mut self.enc_h_skip, &mut self.enc_w1, &mut self.enc_w1b,
            &mut self.enc_w2, &mut self.enc_w2b, &mut self.enc_w_skip, &mut self.dec1,
            &mut self.dec1b, &mut self.dec2, &mut self.dec2b, &mut self.dec_skip,
        ]
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        if clip.t != self.layout.t
            || clip.h != self.layout.h
            || clip.w != self.layout.w
            || clip.c != self.channels
        {
            return Err(Error::InvalidGeometry("clip incompatible with codec geometry".into()));
        }
        Ok(())
    }

    /// Pooled encoder inputs: content patches averaged over time, and
    /// per-time row/column strip profiles averaged over the complementary
    /// spatial axis.
    fn pooled_features(&self, clip: &VideoClip) -> (Mat, Mat, Mat) {
        let lay = self.layout;
        let p = lay.patch;
        let (hp, wp) = (lay.h / p, lay.w / p);
        let c = self.channels;
        // content: P*P*C x n_s
        let mut v_s = Mat::zeros(p * p * c, lay.n_s);
        for gi in 0..hp {
            for gj in 0..wp {
                let col = gi * wp + gj;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for t in 0..lay.t {
                                acc += clip.get(t, gi * p + py, gj * p + px, ch);
                            }
                            v_s.set((py * p + px) * c + ch, col, acc / lay.t as f64);
                        }
                    }
                }
            }
        }
        // height strips: P*C x n_h, token (t, gi), rows averaged over all W
        let mut v_h = Mat::zeros(p * c, lay.n_h);
        for t in 0..lay.t {
            for gi in 0..hp {
                let col = t * hp + gi;
                for py in 0..p {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for x in 0..lay.w {
                            acc += clip.get(t, gi * p + py, x, ch);
                        }
                        v_h.set(py * c + ch, col, acc / lay.w as f64);
                    }
                }
            }
        }
        // width strips: P*C x n_w, token (t, gj), cols averaged over all H
        let mut v_w = Mat::zeros(p * c, lay.n_w);
        for t in 0..lay.t {
            for gj in 0..wp {
                let col = t * wp + gj;
                for px in 0..p {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for y in 0..lay.h {
                            acc += clip.get(t, y, gj * p + px, ch);
                        }
                        v_w.set(px * c + ch, col, acc / lay.h as f64);
                    }
                }
            }
        }
        (v_s, v_h, v_w)
    }

    fn mlp(
        g: &mut Graph,
        x: Id,
        w1: Id,
        b1: Id,
        w2: Id,
        b2: Id,
        skip: Id,
    ) -> Id {
        let h = g.matmul(w1, x);
        let h = g.add_bias(h, b1);
        let h = g.silu(h);
        let h = g.matmul(w2, h);
        let h = g.add_bias(h, b2);
        let sk = g.matmul(skip, x);
        g.add(h, sk)
    }

    fn param_ids(&self, g: &mut Graph) -> Vec<Id> {
        self.params().into_iter().map(|m| g.input(m.clone())).collect()
    }

    /// Graph forward: encode + decode, returning (latent plane ids, patch
    /// pixel prediction id). Pixel prediction is P*P*C x (T*n_s), one column
    /// per (t, patch) in t-major order.
    fn forward(&self, g: &mut Graph, clip: &VideoClip, pids: &[Id]) -> (Id, Id, Id, Id) {
        let lay = self.layout;
        let (v_s, v_h, v_w) = self.pooled_features(clip);
        let vs = g.input(v_s);
        let vh = g.input(v_h);
        let vw = g.input(v_w);
        let z_s = Self::mlp(g, vs, pids[0], pids[1], pids[2], pids[3], pids[4]);
        let z_h = Self::mlp(g, vh, pids[5], pids[6], pids[7], pids[8], pids[9]);
        let z_w = Self::mlp(g, vw, pids[10], pids[11], pids[12], pids[13], pids[14]);
        // assemble decoder input: for column (t, gi, gj): [z_s[:,gi,gj]; z_h[:,t,gi]; z_w[:,t,gj]]
        let p = lay.patch;
        let (hp, wp) = (lay.h / p, lay.w / p);
        let ncols = lay.t * lay.n_s;
        let mut sel_s = Mat::zeros(lay.n_s, ncols);
        let mut sel_h = Mat::zeros(lay.n_h, ncols);
        let mut sel_w = Mat::zeros(lay.n_w, ncols);
        for t in 0..lay.t {
            for gi in 0..hp {
                for gj in 0..wp {
                    let col = (t * hp + gi) * wp + gj;
                    sel_s.set(gi * wp + gj, col, 1.0);
                    sel_h.set(t * hp + gi, col, 1.0);
                    sel_w.set(t * wp + gj, col, 1.0);
                }
            }
        }
        let sel_s = g.input(sel_s);
        let sel_h = g.input(sel_h);
        let sel_w = g.input(sel_w);
        let u_s = g.matmul(z_s, sel_s);
        let u_h = g.matmul(z_h, sel_h);
        let u_w = g.matmul(z_w, sel_w);
        let u = g.concat_rows(&[u_s, u_h, u_w]);
        let out = Self::mlp(g, u, pids[15], pids[16], pids[17], pids[18], pids[19]);
        (z_s, z_h, z_w, out)
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<TriplaneLatent> {
        self.check_clip(clip)?;
        let mut g = Graph::new(false);
        let pids = self.param_ids(&mut g);
        let (z_s, z_h, z_w, _) = self.forward(&mut g, clip, &pids);
        let norm = |m: &Mat| m.map(|v| v / self.lat_scale);
        Ok(TriplaneLatent {
            layout: self.layout,
            z_s: norm(g.value(z_s)),
            z_h: norm(g.value(z_h)),
            z_w: norm(g.value(z_w)),
        })
    }

    pub fn decode(&self, latent: &TriplaneLatent) -> Result<VideoClip> {
        if latent.layout != self.layout {
            return Err(Error::InvalidGeometry("latent layout mismatch".into()));
        }
        let lay = self.layout;
        let p = lay.patch;
        let (hp, wp) = (lay.h / p, lay.w / p);
        let mut g = Graph::new(false);
        let d_in = 3 * lay.c_prime;
        let ncols = lay.t * lay.n_s;
        let mut u = Mat::zeros(d_in, ncols);
        for t in 0..lay.t {
            for gi in 0..hp {
                for gj in 0..wp {
                    let col = (t * hp + gi) * wp + gj;
                    for ch in 0..lay.c_prime {
                        u.set(ch, col, self.lat_scale * latent.z_s.get(ch, gi * wp + gj));
                        u.set(lay.c_prime + ch, col, self.lat_scale * latent.z_h.get(ch, t * hp + gi));
                        u.set(2 * lay.c_prime + ch, col, self.lat_scale * latent.z_w.get(ch, t * wp + gj));
                    }
                }
            }
        }
        let ui = g.input(u);
        let w1 = g.input(self.dec1.clone());
        let b1 = g.input(self.dec1b.clone());
        let w2 = g.input(self.dec2.clone());
        let b2 = g.input(self.dec2b.clone());
        let sk = g.input(self.dec_skip.clone());
        let out = Self::mlp(&mut g, ui, w1, b1, w2, b2, sk);
        Ok(self.patches_to_clip(g.value(out), true))
    }

    fn patches_to_clip(&self, patches: &Mat, clamp: bool) -> VideoClip {
        let lay = self.layout;
        let p = lay.patch;
        let (hp, wp) = (lay.h / p, lay.w / p);
        let c = self.channels;
        let mut clip = VideoClip::zeros(lay.t, lay.h, lay.w, c, Modality::A, Role::Target);
        for t in 0..lay.t {
            for gi in 0..hp {
                for gj in 0..wp {
                    let col = (t * hp + gi) * wp + gj;
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                let mut v = patches.get((py * p + px) * c + ch, col);
                                if clamp {
                                    v = v.clamp(-1.0, 1.0);
                                }
                                clip.set(t, gi * p + py, gj * p + px, ch, v);
                            }
                        }
                    }
                }
            }
        }
        clip
    }

    fn clip_to_patches(&self, clip: &VideoClip) -> Mat {
        let lay = self.layout;
        let p = lay.patch;
        let (hp, wp) = (lay.h / p, lay.w / p);
        let c = self.channels;
        let mut out = Mat::zeros(p * p * c, lay.t * lay.n_s);
        for t in 0..lay.t {
            for gi in 0..hp {
                for gj in 0..wp {
                    let col = (t * hp + gi) * wp + gj;
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                out.set(
                                    (py * p + px) * c + ch,
                                    col,
                                    clip.get(t, gi * p + py, gj * p + px, ch),
                                );
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Either codec behind the same layout contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Codec {
    Test(TestCodec),
    Trained(TrainableCodec),
}

impl Codec {
    pub fn layout(&self) -> LatentLayout {
        match self {
            Codec::Test(c) => c.layout,
            Codec::Trained(c) => c.layout,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Codec::Test(c) => c.channels,
            Codec::Trained(c) => c.channels,
        }
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<TriplaneLatent> {
        match self {
            Codec::Test(c) => c.encode(clip),
            Codec::Trained(c) => c.encode(clip),
        }
    }

    pub fn decode(&self, latent: &TriplaneLatent) -> Result<VideoClip> {
        match self {
            Codec::Test(c) => c.decode(latent),
            Codec::Trained(c) => c.decode(latent),
        }
    }
}

/// Reconstruction training. Returns the per-iteration loss series; the
/// codec is updated in place. Aborts with a diagnostic on NaN loss.
pub fn train_codec(
    codec: &mut TrainableCodec,
    dataset: &[VideoClip],
    iterations: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut opt = Adam::new(lr);
    let mut series = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut g = Graph::new(true);
        let pids = codec.param_ids(&mut g);
        let mut losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let clip = &dataset[rng.gen_range(0..dataset.len())];
            codec.check_clip(clip)?;
            let (_, _, _, pred) = codec.forward(&mut g, clip, &pids);
            let target = g.input(codec.clip_to_patches(clip));
            let d = g.sub(pred, target);
            let sq = g.mul(d, d);
            losses.push(g.mean_all(sq));
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = g.add(loss, l);
        }
        let loss = g.scale(loss, 1.0 / batch as f64);
        let loss_v = g.value(loss).data[0];
        if !loss_v.is_finite() {
            return Err(Error::Numerical(format!(
                "codec training diverged at iteration {} (loss = {})",
                it, loss_v
            )));
        }
        series.push(loss_v);
        let grads = g.backward(loss);
        let grad_mats: Vec<Mat> = pids
            .iter()
            .map(|&id| grads[id].clone().unwrap_or_else(|| {
                let v = g.value(id);
                Mat::zeros(v.rows, v.cols)
            }))
            .collect();
        let mut params = codec.params_mut();
        opt.step(&mut params, &grad_mats);
    }
    // calibrate the latent scale so diffusion sees unit-RMS latents
    codec.lat_scale = 1.0;
    let (mut acc, mut n) = (0.0, 0usize);
    for clip in dataset {
        let z = codec.encode(clip)?;
        for m in [&z.z_s, &z.z_h, &z.z_w] {
            acc += m.data.iter().map(|v| v * v).sum::<f64>();
            n += m.data.len();
        }
    }
    let rms = (acc / n.max(1) as f64).sqrt();
    if rms.is_finite() && rms > 1e-9 {
        codec.lat_scale = rms;
    }
    Ok(series)
}
