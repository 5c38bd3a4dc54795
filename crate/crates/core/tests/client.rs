mod common;

use std::time::{Duration, Instant};

use base64::Engine;
use common::{dead_endpoint, Behaviour, Stub};
use msi_inpaint::backends::{
    diffusion_client_inpaint, BackendRequest, DiffusionClient, InpaintBackend, InpaintParams,
};
use msi_inpaint::masking::{generate_mask, MaskKind};
use msi_inpaint::synth::generate_scene_pair;
use msi_inpaint::{png8, Error};
use ndarray::Array3;

fn request(edge_guided: bool) -> BackendRequest {
    let scene = generate_scene_pair(32, 48, 11).unwrap();
    let mask = generate_mask(32, 48, 0.25, MaskKind::Blob, 3).unwrap();
    let params = InpaintParams {
        seed: 42,
        ..InpaintParams::default()
    };
    BackendRequest::from_scene(&scene, &mask, params, edge_guided).unwrap()
}

const TIMEOUT: Duration = Duration::from_secs(10);

#[test]
fn echo_roundtrip_is_within_one_level() {
    let stub = Stub::start(Behaviour::Echo);
    let req = request(true);
    let out = diffusion_client_inpaint(&stub.endpoint, &req, TIMEOUT).unwrap();
    assert_eq!(out.dim(), req.image().dim());
    let worst = out
        .values()
        .iter()
        .zip(req.image().values().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0, "quantization error {worst}");
    assert_eq!(stub.posts(), 1);
}

#[test]
fn request_body_carries_every_field() {
    let stub = Stub::start(Behaviour::Echo);
    let req = request(true);
    diffusion_client_inpaint(&stub.endpoint, &req, TIMEOUT).unwrap();
    let body = stub.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["prompt"], "a cloud-free satellite image");
    assert_eq!(body["negative_prompt"], "");
    assert_eq!(body["text_guidance_scale"], 1.0);
    assert_eq!(body["num_steps"], 20);
    assert_eq!(body["edge_guidance_scale"], 0.5);
    assert_eq!(body["seed"], 42);

    let b64 = base64::engine::general_purpose::STANDARD;
    let mask = png8::decode(&b64.decode(body["mask_png_b64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(mask.dim(), (1, 32, 48));
    for ((_, r, c), &v) in mask.indexed_iter() {
        assert_eq!(v, if req.mask().is_missing(r, c) { 1.0 } else { 0.0 });
    }
    let control = png8::decode(&b64.decode(body["control_png_b64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(control.dim(), (1, 32, 48));
}

#[test]
fn plain_request_has_no_control() {
    let stub = Stub::start(Behaviour::Echo);
    diffusion_client_inpaint(&stub.endpoint, &request(false), TIMEOUT).unwrap();
    let body = stub.bodies.lock().unwrap()[0].clone();
    assert!(body.get("control_png_b64").is_none());
}

#[test]
fn server_error_carries_message_and_is_not_retried() {
    let stub = Stub::start(Behaviour::Fail(500, "no weights".into()));
    let err = diffusion_client_inpaint(&stub.endpoint, &request(false), TIMEOUT).unwrap_err();
    match err {
        Error::Server { status, message } => {
            assert_eq!(status, 500);
            assert_eq!(message, "no weights");
        }
        other => panic!("expected a server error, got {other:?}"),
    }
    assert_eq!(stub.posts(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error_within_timeout() {
    let timeout = Duration::from_secs(3);
    let start = Instant::now();
    let err = diffusion_client_inpaint(&dead_endpoint(), &request(false), timeout).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err:?}");
    assert!(start.elapsed() <= timeout + Duration::from_secs(1));
}

#[test]
fn wrong_size_reply_is_a_protocol_error() {
    let png = png8::encode(Array3::from_elem((3, 4, 4), 0.5).view()).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let stub = Stub::start(Behaviour::Fixed(b64));
    let err = diffusion_client_inpaint(&stub.endpoint, &request(false), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn garbage_reply_is_a_protocol_error() {
    let stub = Stub::start(Behaviour::Fixed("%%%not base64".into()));
    let err = diffusion_client_inpaint(&stub.endpoint, &request(false), TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn health_reports_model_info() {
    let stub = Stub::start(Behaviour::Echo);
    let client = DiffusionClient::new(&stub.endpoint, TIMEOUT, true);
    assert_eq!(client.health().unwrap(), "loopback stub");
    assert_eq!(client.name(), "edge-guided");
    assert!(DiffusionClient::new(&dead_endpoint(), TIMEOUT, false).health().is_err());
}
