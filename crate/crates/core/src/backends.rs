//! RGB inpainting backends: the request/response contract, a deterministic
//! mock, an HTTP client for an external diffusion service, and the
//! single-stage Deep-Image-Prior baselines.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{extract_rgb, InpaintMask, MsiCube, RgbImage, ScenePair, NUM_BANDS};
use crate::dip::{noise_input, train_dip, LossMask, SkipNetConfig, TrainSpec};
use crate::error::{Error, Result};
use crate::guidance::{edge_map, EdgeMap};
use crate::masking::{apply_fill, composite_known, FillMode};
use crate::{filter, png8};

pub const DEFAULT_PROMPT: &str = "a cloud-free satellite image";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Generation parameters forwarded to a diffusion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintParams {
    pub prompt: String,
    pub negative_prompt: String,
    pub text_guidance_scale: f64,
    pub num_steps: u32,
    pub edge_guidance_scale: f64,
    pub mask_fill_mode: FillMode,
    pub seed: u64,
}

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            prompt: DEFAULT_PROMPT.to_string(),
            negative_prompt: String::new(),
            text_guidance_scale: 1.0,
            num_steps: 20,
            edge_guidance_scale: 0.5,
            mask_fill_mode: FillMode::Historical,
            seed: 0,
        }
    }
}

impl InpaintParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        for (name, v) in [
            ("text_guidance_scale", self.text_guidance_scale),
            ("edge_guidance_scale", self.edge_guidance_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One stage-one call: the fill-initialised RGB image, its mask and an optional edge control.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    image: RgbImage,
    mask: InpaintMask,
    control: Option<EdgeMap>,
    params: InpaintParams,
}

impl BackendRequest {
    pub fn new(
        image: RgbImage,
        mask: InpaintMask,
        control: Option<EdgeMap>,
        params: InpaintParams,
    ) -> Result<Self> {
        params.validate()?;
        let (h, w) = image.dim();
        mask.check_dim(h, w)?;
        if let Some(c) = &control {
            if c.dim() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    got: vec![c.dim().0, c.dim().1],
                });
            }
        }
        Ok(Self {
            image,
            mask,
            control,
            params,
        })
    }

    /// Builds the request for a scene: masked pixels filled per
    /// `params.mask_fill_mode`, and with `edge_guided` the edge map of the
    /// historical RGB as control.
    pub fn from_scene(
        scene: &ScenePair,
        mask: &InpaintMask,
        params: InpaintParams,
        edge_guided: bool,
    ) -> Result<Self> {
        let filled = apply_fill(scene, mask, params.mask_fill_mode)?;
        let control = edge_guided.then(|| edge_map(&extract_rgb(&scene.historical)));
        Self::new(extract_rgb(&filled), mask.clone(), control, params)
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn mask(&self) -> &InpaintMask {
        &self.mask
    }

    pub fn control(&self) -> Option<&EdgeMap> {
        self.control.as_ref()
    }

    pub fn params(&self) -> &InpaintParams {
        &self.params
    }
}

/// A stage-one RGB inpainter. Outputs are always composited with the known
/// pixels afterwards, so implementations may alter them.
pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;
    fn inpaint(&self, request: &BackendRequest) -> Result<RgbImage>;
}

/// Deterministic stand-in for the diffusion service.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockBackend {
    pub blend: f64,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self { blend: 1.0 }
    }
}

impl InpaintBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn inpaint(&self, request: &BackendRequest) -> Result<RgbImage> {
        mock_inpaint(request, self.blend)
    }
}

/// Masked pixels become `blend * image + (1 - blend) * box5(image)`; known pixels pass through.
pub fn mock_inpaint(request: &BackendRequest, blend: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Precondition(format!("blend must lie in [0, 1], got {blend}")));
    }
    let img = request.image.values();
    let mask = request.mask.values();
    let taps = [0.2; 5];
    let mut out = img.to_owned();
    for (mut plane, src) in out.outer_iter_mut().zip(img.outer_iter()) {
        let blurred = filter::separable(src, &taps);
        ndarray::Zip::from(&mut plane)
            .and(&blurred)
            .and(&mask)
            .for_each(|o, &b, &m| {
                if m {
                    *o = (blend * *o + (1.0 - blend) * b).clamp(0.0, 1.0);
                }
            });
    }
    Ok(RgbImage::from_trusted(out))
}

#[derive(Serialize)]
struct WireRequest<'a> {
    image_png_b64: String,
    mask_png_b64: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    control_png_b64: Option<String>,
    prompt: &'a str,
    negative_prompt: &'a str,
    text_guidance_scale: f64,
    num_steps: u32,
    edge_guidance_scale: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    image_png_b64: String,
    #[serde(default)]
    model_info: String,
}

#[derive(Deserialize)]
struct WireError {
    error: String,
}

#[derive(Deserialize)]
struct WireHealth {
    status: String,
    #[serde(default)]
    model_info: String,
}

fn encode_b64(planes: ndarray::ArrayView3<'_, f64>) -> Result<String> {
    Ok(B64.encode(png8::encode(planes)?))
}

/// HTTP client for a diffusion inpainting service.
#[derive(Debug, Clone)]
pub struct DiffusionClient {
    endpoint: String,
    timeout: Duration,
    edge_guided: bool,
    agent: ureq::Agent,
}

impl DiffusionClient {
    /// `edge_guided` only affects [`DiffusionClient::name`]; whether a
    /// control image is sent is decided by the request.
    pub fn new(endpoint: &str, timeout: Duration, edge_guided: bool) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout,
            edge_guided,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Queries `GET /health` and returns the reported model description.
    pub fn health(&self) -> Result<String> {
        let url = format!("{}/health", self.endpoint);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(server_error(status, &text));
        }
        let health: WireHealth = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("health response: {e}")))?;
        if health.status != "ok" {
            return Err(Error::Protocol(format!("service status {:?}", health.status)));
        }
        Ok(health.model_info)
    }

    fn post(&self, request: &BackendRequest) -> Result<RgbImage> {
        let p = &request.params;
        let mask = request.mask.to_binary().insert_axis(Axis(0));
        let body = WireRequest {
            image_png_b64: encode_b64(request.image.values())?,
            mask_png_b64: encode_b64(mask.view())?,
            control_png_b64: match &request.control {
                Some(c) => Some(encode_b64(c.values().insert_axis(Axis(0)))?),
                None => None,
            },
            prompt: &p.prompt,
            negative_prompt: &p.negative_prompt,
            text_guidance_scale: p.text_guidance_scale,
            num_steps: p.num_steps,
            edge_guidance_scale: p.edge_guidance_scale,
            seed: p.seed,
        };
        let url = format!("{}/inpaint", self.endpoint);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(server_error(status, &text));
        }
        let reply: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("inpaint response: {e}")))?;
        log::debug!("inpainted by {:?}", reply.model_info);
        let png = B64
            .decode(reply.image_png_b64.as_bytes())
            .map_err(|e| Error::Protocol(format!("response image base64: {e}")))?;
        let img = png8::decode(&png).map_err(|e| Error::Protocol(e.to_string()))?;
        let (h, w) = request.image.dim();
        if img.dim() != (3, h, w) {
            return Err(Error::Protocol(format!(
                "expected a {h}x{w} RGB image, got shape {:?}",
                img.shape()
            )));
        }
        Ok(RgbImage::from_trusted(img))
    }
}

fn server_error(status: u16, body: &str) -> Error {
    let message = serde_json::from_str::<WireError>(body)
        .map(|e| e.error)
        .unwrap_or_else(|_| body.trim().to_string());
    Error::Server { status, message }
}

impl InpaintBackend for DiffusionClient {
    fn name(&self) -> &str {
        if self.edge_guided {
            "edge-guided"
        } else {
            "sd-inpaint"
        }
    }

    fn inpaint(&self, request: &BackendRequest) -> Result<RgbImage> {
        self.post(request)
    }
}

/// One `POST {endpoint}/inpaint` round trip.
pub fn diffusion_client_inpaint(
    endpoint: &str,
    request: &BackendRequest,
    timeout: Duration,
) -> Result<RgbImage> {
    DiffusionClient::new(endpoint, timeout, request.control.is_some()).inpaint(request)
}

/// Single-stage 13-band DIP inpainting. The network sees noise, or with
/// `use_historical` the historical cube, and is fitted to the known pixels
/// of the current cube. Channel counts of `config` are adjusted to the data.
pub fn direct_dip_inpaint(
    scene: &ScenePair,
    mask: &InpaintMask,
    use_historical: bool,
    spec: &TrainSpec,
    config: &SkipNetConfig,
) -> Result<MsiCube> {
    let (h, w) = scene.dim();
    mask.check_dim(h, w)?;
    if mask.is_empty() {
        return Ok(scene.current.clone());
    }
    let input: Array3<f64> = if use_historical {
        scene.historical.values().to_owned()
    } else {
        noise_input(config.input_channels, h, w, spec.seed)
    };
    let config = SkipNetConfig {
        input_channels: input.dim().0,
        out_channels: NUM_BANDS,
        ..config.clone()
    };
    let known = mask.values().mapv(|m| !m);
    let lmask = LossMask::new(
        known
            .insert_axis(Axis(0))
            .broadcast((NUM_BANDS, h, w))
            .expect("broadcast over bands")
            .to_owned(),
    )?;
    let fit = train_dip(&config, input.view(), scene.current.values(), &lmask, spec)?;
    let synthesized = MsiCube::from_trusted(fit.output.mapv(|v| v.clamp(0.0, 1.0)));
    composite_known(&synthesized, &scene.current, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RGB_BANDS;
    use crate::masking::{generate_mask, MaskKind};
    use crate::synth::generate_scene_pair;
    use ndarray::Array2;

    fn request(scene: &ScenePair, mask: &InpaintMask, mode: FillMode) -> BackendRequest {
        let params = InpaintParams {
            mask_fill_mode: mode,
            ..InpaintParams::default()
        };
        BackendRequest::from_scene(scene, mask, params, false).unwrap()
    }

    #[test]
    fn defaults() {
        let p = InpaintParams::default();
        assert_eq!(p.prompt, "a cloud-free satellite image");
        assert_eq!(p.negative_prompt, "");
        assert_eq!(p.text_guidance_scale, 1.0);
        assert_eq!(p.num_steps, 20);
        assert_eq!(p.edge_guidance_scale, 0.5);
        assert_eq!(p.mask_fill_mode, FillMode::Historical);
    }

    #[test]
    fn invalid_params_rejected() {
        let scene = generate_scene_pair(16, 16, 1).unwrap();
        let mask = InpaintMask::empty(16, 16);
        for params in [
            InpaintParams { num_steps: 0, ..Default::default() },
            InpaintParams { text_guidance_scale: -1.0, ..Default::default() },
            InpaintParams { edge_guidance_scale: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(
                BackendRequest::from_scene(&scene, &mask, params, false),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn request_dimensions_must_agree() {
        let scene = generate_scene_pair(16, 16, 1).unwrap();
        let img = extract_rgb(&scene.current);
        let bad_mask = InpaintMask::empty(16, 8);
        assert!(BackendRequest::new(img.clone(), bad_mask, None, Default::default()).is_err());
        let bad_edge = EdgeMap::new(Array2::zeros((8, 16))).unwrap();
        let mask = InpaintMask::empty(16, 16);
        assert!(BackendRequest::new(img, mask, Some(bad_edge), Default::default()).is_err());
    }

    #[test]
    fn edge_guided_request_carries_historical_edges() {
        let scene = generate_scene_pair(16, 16, 2).unwrap();
        let mask = generate_mask(16, 16, 0.25, MaskKind::Rect, 0).unwrap();
        let plain = BackendRequest::from_scene(&scene, &mask, Default::default(), false).unwrap();
        assert!(plain.control().is_none());
        let guided = BackendRequest::from_scene(&scene, &mask, Default::default(), true).unwrap();
        let expected = edge_map(&extract_rgb(&scene.historical));
        assert_eq!(guided.control(), Some(&expected));
    }

    #[test]
    fn mock_full_blend_returns_historical_fill() {
        let scene = generate_scene_pair(32, 32, 3).unwrap();
        let mask = generate_mask(32, 32, 0.25, MaskKind::Rect, 5).unwrap();
        let req = request(&scene, &mask, FillMode::Historical);
        let out = mock_inpaint(&req, 1.0).unwrap();
        let hist = scene.historical.values();
        let cur = scene.current.values();
        for ((ch, r, c), &v) in out.values().indexed_iter() {
            let band = RGB_BANDS[ch];
            let expect = if mask.is_missing(r, c) { hist[[band, r, c]] } else { cur[[band, r, c]] };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn mock_zero_blend_keeps_constant_image() {
        let img = RgbImage::new(Array3::from_elem((3, 10, 12), 0.37)).unwrap();
        let mask = InpaintMask::full(10, 12);
        let req = BackendRequest::new(img.clone(), mask, None, Default::default()).unwrap();
        let out = mock_inpaint(&req, 0.0).unwrap();
        for (&a, &b) in out.values().iter().zip(img.values().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mock_half_blend_matches_neighbourhood_average() {
        let vals = Array3::from_shape_fn((3, 9, 9), |(ch, r, c)| {
            ((ch * 31 + r * 7 + c * 13) % 17) as f64 / 16.0
        });
        let img = RgbImage::new(vals.clone()).unwrap();
        let mut m = Array2::from_elem((9, 9), false);
        m[[4, 5]] = true;
        let req = BackendRequest::new(img, InpaintMask::new(m), None, Default::default()).unwrap();
        let out = mock_inpaint(&req, 0.5).unwrap();
        for ch in 0..3 {
            let mut sum = 0.0;
            for r in 2..=6 {
                for c in 3..=7 {
                    sum += vals[[ch, r, c]];
                }
            }
            let expect = 0.5 * vals[[ch, 4, 5]] + 0.5 * sum / 25.0;
            assert!((out.values()[[ch, 4, 5]] - expect).abs() < 1e-12);
            assert_eq!(out.values()[[ch, 0, 0]], vals[[ch, 0, 0]]);
        }
    }

    #[test]
    fn mock_is_deterministic_and_in_range() {
        let scene = generate_scene_pair(16, 16, 4).unwrap();
        let mask = generate_mask(16, 16, 0.4, MaskKind::Blob, 1).unwrap();
        let req = request(&scene, &mask, FillMode::Blank);
        let a = mock_inpaint(&req, 0.3).unwrap();
        assert_eq!(a, mock_inpaint(&req, 0.3).unwrap());
        assert_eq!(a.dim(), (16, 16));
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(mock_inpaint(&req, 1.5).is_err());
    }

    #[test]
    fn direct_dip_with_empty_mask_returns_current() {
        let scene = generate_scene_pair(16, 16, 6).unwrap();
        let out = direct_dip_inpaint(
            &scene,
            &InpaintMask::empty(16, 16),
            false,
            &TrainSpec::default(),
            &SkipNetConfig::desk_scale(13),
        )
        .unwrap();
        assert_eq!(out, scene.current);
    }

    #[test]
    fn direct_dip_preserves_known_pixels_and_is_deterministic() {
        let scene = generate_scene_pair(16, 16, 7).unwrap();
        let mask = generate_mask(16, 16, 0.25, MaskKind::Rect, 2).unwrap();
        let spec = TrainSpec { steps: 5, seed: 3, ..TrainSpec::default() };
        let config = SkipNetConfig::desk_scale(13);
        for hist in [false, true] {
            let a = direct_dip_inpaint(&scene, &mask, hist, &spec, &config).unwrap();
            let b = direct_dip_inpaint(&scene, &mask, hist, &spec, &config).unwrap();
            assert_eq!(a, b);
            let cur = scene.current.values();
            for ((b, r, c), &v) in a.values().indexed_iter() {
                if !mask.is_missing(r, c) {
                    assert_eq!(v.to_bits(), cur[[b, r, c]].to_bits());
                }
            }
        }
    }

    #[test]
    fn direct_dip_full_mask_has_no_known_pixels() {
        let scene = generate_scene_pair(16, 16, 8).unwrap();
        let spec = TrainSpec { steps: 1, ..TrainSpec::default() };
        let r = direct_dip_inpaint(&scene, &InpaintMask::full(16, 16), false, &spec, &SkipNetConfig::desk_scale(13));
        assert!(matches!(r, Err(Error::EmptyRegion)));
    }
}
