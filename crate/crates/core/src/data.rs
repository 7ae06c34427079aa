//! Synthetic datasets (scripted pusher episodes with actions, bouncing
//! sprites without), the on-disk container and train/test splitting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use fitvid_tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pusher::{self, level_to_unit, unit_to_level, PusherState, ACTION_BOUND};

pub const DATA_MAGIC: &[u8; 6] = b"FVDATA";
pub const DATA_VERSION: u32 = 1;
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub resolution: usize,
    pub channels: usize,
    pub action_dim: usize,
    pub seed: u64,
    pub format_version: u32,
    /// Free-form additional entries (for example pusher initial states).
    pub extra: BTreeMap<String, String>,
}

impl DatasetManifest {
    fn entries(&self) -> BTreeMap<String, String> {
        let mut m = self.extra.clone();
        m.insert("name".into(), self.name.clone());
        m.insert("num_videos".into(), self.num_videos.to_string());
        m.insert("frames_per_video".into(), self.frames_per_video.to_string());
        m.insert("resolution".into(), self.resolution.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("action_dim".into(), self.action_dim.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("format_version".into(), self.format_version.to_string());
        m
    }

    /// Key-sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Inconsistent(format!("bad manifest line {line:?}")))?;
            m.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| {
            m.remove(k)
                .ok_or_else(|| Error::Inconsistent(format!("manifest lacks {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Inconsistent(format!("manifest {k}={v:?} is not a number")))
        }
        let name = take("name")?;
        let num_videos = num("num_videos", take("num_videos")?)?;
        let frames_per_video = num("frames_per_video", take("frames_per_video")?)?;
        let resolution = num("resolution", take("resolution")?)?;
        let channels = num("channels", take("channels")?)?;
        let action_dim = num("action_dim", take("action_dim")?)?;
        let seed = num("seed", take("seed")?)?;
        let format_version = num("format_version", take("format_version")?)?;
        Ok(Self {
            name,
            num_videos,
            frames_per_video,
            resolution,
            channels,
            action_dim,
            seed,
            format_version,
            extra: m,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, T, R, R, C]` in [0, 1].
    pub videos: Tensor<f32>,
    /// `[N, T, A]`, absent for action-free data.
    pub actions: Option<Tensor<f32>>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Videos (and actions) at `indices`, stacked in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Option<Tensor<f32>>) {
        let pick = |x: &Tensor<f32>| Tensor::stack(&indices.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>());
        (pick(&self.videos), self.actions.as_ref().map(pick))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (videos, actions) = self.gather(indices);
        let mut manifest = self.manifest.clone();
        manifest.num_videos = indices.len();
        manifest.extra.remove("initial_states");
        Self {
            videos,
            actions,
            manifest,
        }
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        let want = [m.num_videos, m.frames_per_video, m.resolution, m.resolution, m.channels];
        if self.videos.shape() != want {
            return Err(Error::Inconsistent(format!(
                "manifest describes {want:?} but videos are {:?}",
                self.videos.shape()
            )));
        }
        match (&self.actions, m.action_dim) {
            (None, 0) => Ok(()),
            (Some(a), ad) if a.shape() == [m.num_videos, m.frames_per_video, ad] && ad > 0 => Ok(()),
            _ => Err(Error::Inconsistent("actions do not match the manifest".into())),
        }
    }
}

/// Pusher starting states recorded in the manifest, one per video.
pub fn initial_states(manifest: &DatasetManifest) -> Result<Vec<PusherState>> {
    let raw = manifest
        .extra
        .get("initial_states")
        .ok_or_else(|| Error::Inconsistent("manifest has no initial states".into()))?;
    let vals: Vec<f64> = raw
        .split(',')
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Inconsistent("malformed initial states".into()))?;
    if vals.len() != 6 * manifest.num_videos {
        return Err(Error::Inconsistent("initial state count differs from video count".into()));
    }
    Ok(vals
        .chunks(6)
        .map(|v| PusherState::new([v[0], v[1]], [v[2], v[3]], [v[4], v[5]]))
        .collect())
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// A random non-overlapping start: object and goal away from the walls.
pub fn random_pusher_state<R: Rng>(rng: &mut R) -> PusherState {
    loop {
        let agent = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let object = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let goal = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let s = PusherState::new(agent, object, goal);
        if !s.overlaps(s.agent, s.object) {
            return s;
        }
    }
}

/// Scripted behaviour: alternating random-walk and push-toward-goal
/// segments.
fn scripted_action<R: Rng>(state: &PusherState, pushing: bool, prev: [f64; 2], rng: &mut R) -> [f64; 2] {
    if pushing {
        let d = [state.goal[0] - state.object[0], state.goal[1] - state.object[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
        let dir = [d[0] / n, d[1] / n];
        let back = state.agent_half + state.object_radius + 0.01;
        let stage = [state.object[0] - dir[0] * back, state.object[1] - dir[1] * back];
        let to = [stage[0] - state.agent[0], stage[1] - state.agent[1]];
        let dist = (to[0] * to[0] + to[1] * to[1]).sqrt();
        let a = if dist > 0.03 {
            [to[0], to[1]]
        } else {
            [dir[0] * ACTION_BOUND, dir[1] * ACTION_BOUND]
        };
        [a[0] + rng.gen_range(-0.01..0.01), a[1] + rng.gen_range(-0.01..0.01)]
    } else {
        [
            0.6 * prev[0] + rng.gen_range(-0.06..0.06),
            0.6 * prev[1] + rng.gen_range(-0.06..0.06),
        ]
    }
}

/// Per-video episode: frames `[T, R, R, 3]`, actions `[T, 2]`, start state.
fn pusher_episode(seed: u64, index: usize, t: usize, res: usize) -> (Vec<f32>, Vec<f32>, PusherState) {
    let mut rng = video_rng(seed, index);
    let start = random_pusher_state(&mut rng);
    let mut state = start;
    let mut frames = Vec::with_capacity(t * res * res * 3);
    let mut actions = Vec::with_capacity(t * 2);
    let mut pushing = rng.gen_bool(0.5);
    let mut prev = [0.0, 0.0];
    for step in 0..t {
        frames.extend(pusher::render(&state, res));
        if step % 4 == 0 && rng.gen_bool(0.3) {
            pushing = !pushing;
        }
        let a = pusher::clamp_action(scripted_action(&state, pushing, prev, &mut rng));
        let a32 = [pusher::action_to_f32(a[0]), pusher::action_to_f32(a[1])];
        actions.extend_from_slice(&a32);
        let applied = [a32[0] as f64, a32[1] as f64];
        state = pusher::step_state(&state, applied).0;
        prev = applied;
    }
    (frames, actions, start)
}

/// `n` scripted pusher episodes of `t` frames at `res x res`. The manifest
/// records every start state so the episodes can be replayed.
pub fn generate_pusher_dataset_at(n: usize, t: usize, seed: u64, res: usize) -> Result<Dataset> {
    if n < 1 || t < 2 || res < 1 {
        return Err(Error::Parameter("need n >= 1, T >= 2 and a positive resolution".into()));
    }
    let eps = par::map_range(n, |i| pusher_episode(seed, i, t, res));
    let mut frames = Vec::with_capacity(n * t * res * res * 3);
    let mut actions = Vec::with_capacity(n * t * 2);
    let mut starts = Vec::with_capacity(n * 6);
    for (f, a, s) in eps {
        frames.extend(f);
        actions.extend(a);
        starts.extend([s.agent[0], s.agent[1], s.object[0], s.object[1], s.goal[0], s.goal[1]]);
    }
    let mut extra = BTreeMap::new();
    extra.insert(
        "initial_states".to_string(),
        starts.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","),
    );
    extra.insert("action_bound".to_string(), format!("{ACTION_BOUND:?}"));
    Ok(Dataset {
        videos: Tensor::from_vec(&[n, t, res, res, 3], frames),
        actions: Some(Tensor::from_vec(&[n, t, 2], actions)),
        manifest: DatasetManifest {
            name: "pusher".into(),
            num_videos: n,
            frames_per_video: t,
            resolution: res,
            channels: 3,
            action_dim: 2,
            seed,
            format_version: DATA_VERSION,
            extra,
        },
    })
}

pub fn generate_pusher_dataset(n: usize, t: usize, seed: u64) -> Result<Dataset> {
    generate_pusher_dataset_at(n, t, seed, DEFAULT_RESOLUTION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Square,
    Disc,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub radius: f64,
    pub color: [f64; 3],
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl Sprite {
    fn contains(&self, c: [f64; 2], x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - c[0]).abs(), (y - c[1]).abs());
        match self.shape {
            SpriteShape::Square => dx < self.radius && dy < self.radius,
            SpriteShape::Disc => dx * dx + dy * dy < self.radius * self.radius,
            SpriteShape::Diamond => dx + dy < self.radius,
        }
    }

    /// Centre at each of `t` frames, bouncing elastically off the walls.
    pub fn trajectory(&self, t: usize) -> Vec<[f64; 2]> {
        let axis = |k: usize| bounce_path(self.position[k], self.velocity[k], self.radius, 1.0 - self.radius, t);
        let (xs, ys) = (axis(0), axis(1));
        xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect()
    }
}

/// Stepwise 1-D motion inside `[lo, hi]`, reflecting at the bounds.
pub fn bounce_path(p0: f64, v0: f64, lo: f64, hi: f64, t: usize) -> Vec<f64> {
    let (mut p, mut v) = (p0, v0);
    let mut out = Vec::with_capacity(t);
    for step in 0..t {
        if step > 0 {
            p += v;
            loop {
                if p > hi {
                    p = 2.0 * hi - p;
                    v = -v;
                } else if p < lo {
                    p = 2.0 * lo - p;
                    v = -v;
                } else {
                    break;
                }
            }
        }
        out.push(p);
    }
    out
}

const SPRITE_BACKGROUND: [f64; 3] = [0.05, 0.05, 0.08];

/// Renders `t` frames `[t, res, res, 3]` of the given sprites.
pub fn render_sprites(sprites: &[Sprite], t: usize, res: usize) -> Vec<f32> {
    let paths: Vec<Vec<[f64; 2]>> = sprites.iter().map(|s| s.trajectory(t)).collect();
    let mut out = Vec::with_capacity(t * res * res * 3);
    let ss = 4;
    let step = 1.0 / (res * ss) as f64;
    for ti in 0..t {
        let mut img: Vec<f64> = SPRITE_BACKGROUND.iter().copied().cycle().take(res * res * 3).collect();
        for (s, path) in sprites.iter().zip(&paths) {
            let c = path[ti];
            let lo = |v: f64| ((v - s.radius) * res as f64).floor().max(0.0) as usize;
            let hi = |v: f64| (((v + s.radius) * res as f64).ceil().max(0.0) as usize).min(res);
            for py in lo(c[1]).min(res)..hi(c[1]) {
                for px in lo(c[0]).min(res)..hi(c[0]) {
                    let mut hits = 0;
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let x = (px * ss + sx) as f64 * step + 0.5 * step;
                            let y = (py * ss + sy) as f64 * step + 0.5 * step;
                            hits += s.contains(c, x, y) as usize;
                        }
                    }
                    let cov = hits as f64 / (ss * ss) as f64;
                    let base = (py * res + px) * 3;
                    for k in 0..3 {
                        img[base + k] = img[base + k] * (1.0 - cov) + s.color[k] * cov;
                    }
                }
            }
        }
        out.extend(img.into_iter().map(pusher::quantize));
    }
    out
}

fn random_sprites<R: Rng>(rng: &mut R) -> Vec<Sprite> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            let radius = rng.gen_range(0.06..0.12);
            let shape = [SpriteShape::Square, SpriteShape::Disc, SpriteShape::Diamond][rng.gen_range(0..3)];
            let mut color = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
            color[rng.gen_range(0..3)] = 1.0;
            Sprite {
                shape,
                radius,
                color,
                position: [rng.gen_range(radius..1.0 - radius), rng.gen_range(radius..1.0 - radius)],
                velocity: [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)],
            }
        })
        .collect()
}

/// `n` action-free videos of 1-3 bouncing sprites.
pub fn generate_sprites_dataset_at(n: usize, t: usize, seed: u64, res: usize) -> Result<Dataset> {
    if n < 1 || t < 2 || res < 1 {
        return Err(Error::Parameter("need n >= 1, T >= 2 and a positive resolution".into()));
    }
    let vids = par::map_range(n, |i| render_sprites(&random_sprites(&mut video_rng(seed, i)), t, res));
    Ok(Dataset {
        videos: Tensor::from_vec(&[n, t, res, res, 3], vids.concat()),
        actions: None,
        manifest: DatasetManifest {
            name: "sprites".into(),
            num_videos: n,
            frames_per_video: t,
            resolution: res,
            channels: 3,
            action_dim: 0,
            seed,
            format_version: DATA_VERSION,
            extra: BTreeMap::new(),
        },
    })
}

pub fn generate_sprites_dataset(n: usize, t: usize, seed: u64) -> Result<Dataset> {
    generate_sprites_dataset_at(n, t, seed, DEFAULT_RESOLUTION)
}

/// Serialises a dataset into the container format.
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check()?;
    let manifest = ds.manifest.to_text();
    let mut out = Vec::with_capacity(14 + manifest.len() + ds.videos.numel());
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&ds.manifest.format_version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend(ds.videos.data().iter().map(|&v| unit_to_level(v)));
    if let Some(a) = &ds.actions {
        for &v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 6 || &bytes[..6] != DATA_MAGIC {
        return Err(Error::BadMagic("dataset"));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::TruncatedPayload("header is incomplete".into()))
    };
    let version = word(6)?;
    if version != DATA_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: DATA_VERSION,
        });
    }
    let mlen = word(10)? as usize;
    let text = bytes
        .get(14..14 + mlen)
        .ok_or_else(|| Error::TruncatedPayload("manifest is incomplete".into()))?;
    let text = std::str::from_utf8(text).map_err(|_| Error::Inconsistent("manifest is not utf-8".into()))?;
    let manifest = DatasetManifest::parse(text)?;
    if manifest.format_version != version {
        return Err(Error::Inconsistent("manifest and header disagree on the version".into()));
    }
    let (n, t, r, c, ad) = (
        manifest.num_videos,
        manifest.frames_per_video,
        manifest.resolution,
        manifest.channels,
        manifest.action_dim,
    );
    let nframes = n * t * r * r * c;
    let nact = n * t * ad;
    let body = &bytes[14 + mlen..];
    let need = nframes + 4 * nact;
    if body.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "payload holds {} bytes, manifest implies {need}",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::Inconsistent(format!(
            "payload holds {} bytes, manifest implies {need}",
            body.len()
        )));
    }
    let videos = Tensor::from_vec(&[n, t, r, r, c], body[..nframes].iter().map(|&b| level_to_unit(b)).collect());
    let actions = (ad > 0).then(|| {
        Tensor::from_vec(
            &[n, t, ad],
            body[nframes..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    });
    Ok(Dataset {
        videos,
        actions,
        manifest,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn dataset_write(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn dataset_read(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

/// Builds a dataset from any source of `([T, R, R, C], Option<[T, A]>)`
/// pairs, for example an adapter over real recordings.
pub fn dataset_from_source<I>(name: &str, source: I) -> Result<Dataset>
where
    I: IntoIterator<Item = (Tensor<f32>, Option<Tensor<f32>>)>,
{
    let items: Vec<_> = source.into_iter().collect();
    let (first, first_a) = items
        .first()
        .ok_or_else(|| Error::Parameter("source yielded no videos".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Shape(format!("videos must be [T, R, R, C], got {s:?}")));
    }
    let ad = first_a.as_ref().map_or(0, |a| a.dim(1));
    let mut vids = Vec::new();
    let mut acts = Vec::new();
    for (v, a) in &items {
        if v.shape() != s || a.as_ref().map_or(0, |a| a.dim(1)) != ad {
            return Err(Error::Shape("source videos differ in shape".into()));
        }
        if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain("video values must lie in [0, 1]".into()));
        }
        vids.push(v.clone());
        if let Some(a) = a {
            if a.shape() != [s[0], ad] {
                return Err(Error::Shape("actions must be [T, A]".into()));
            }
            acts.push(a.clone());
        }
    }
    Ok(Dataset {
        videos: Tensor::stack(&vids),
        actions: (ad > 0).then(|| Tensor::stack(&acts)),
        manifest: DatasetManifest {
            name: name.into(),
            num_videos: items.len(),
            frames_per_video: s[0],
            resolution: s[1],
            channels: s[3],
            action_dim: ad,
            seed: 0,
            format_version: DATA_VERSION,
            extra: BTreeMap::new(),
        },
    })
}

/// Disjoint train/test index sets. Videos are ordered by a salted hash of
/// their index and the first `test_count` go to the test split.
pub fn train_test_split(n: usize, test_count: usize, salt: &str) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<([u8; 32], usize)> = (0..n)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(salt.as_bytes());
            h.update((i as u64).to_le_bytes());
            (h.finalize().into(), i)
        })
        .collect();
    keyed.sort();
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let k = test_count.min(n);
    let mut test = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let ds = generate_pusher_dataset_at(2, 3, 4, 16).unwrap();
        let back = DatasetManifest::parse(&ds.manifest.to_text()).unwrap();
        assert_eq!(back, ds.manifest);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let (train, test) = train_test_split(20, 5, "salt");
        assert_eq!(test.len(), 5);
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(train_test_split(20, 5, "salt"), (train, test));
    }

    #[test]
    fn bounce_reflects_at_walls() {
        let p = bounce_path(0.8, 0.15, 0.1, 0.9, 3);
        assert!((p[1] - 0.85).abs() < 1e-12);
        assert!((p[2] - 0.7).abs() < 1e-12);
    }
}
