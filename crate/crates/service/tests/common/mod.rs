#![allow(dead_code)]

use std::io::Cursor;
use std::net::SocketAddr;

use image::RgbImage;
use pavescan::data::{class_names, render_image, SyntheticConfig};
use pavescan::{Checkpoint, Detector, NetworkConfig};
use pavescan_service::server::{self, AppState, ServerConfig};
use pavescan_service::Model;

/// Three-scale network at 64 px with four classes.
pub fn test_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 64,
        width_multiple: 1.0,
        stem_channels: 4,
        stage_channels: vec![8, 8, 16, 16],
        anchors: vec![
            vec![[6.0, 8.0], [12.0, 10.0]],
            vec![[16.0, 24.0], [28.0, 20.0]],
            vec![[40.0, 36.0], [56.0, 52.0]],
        ],
        ..NetworkConfig::toy()
    }
}

/// Untrained weights with the head biases spread out so that a fair number
/// of boxes clear low thresholds.
pub fn test_checkpoint(seed: u64) -> Checkpoint {
    let mut det = Detector::<f32>::new(test_config(), seed).unwrap();
    for e in det.params_mut().entries_mut() {
        if e.name.starts_with("head.") && e.value.shape().len() == 1 {
            for (i, v) in e.value.data_mut().iter_mut().enumerate() {
                let h = ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 43758.5453;
                *v = (h - h.floor()) as f32 * 3.0 - 1.5;
            }
        }
    }
    Checkpoint::from_detector(&det, class_names(), Default::default())
}

pub fn test_model(seed: u64) -> Model {
    Model::from_checkpoint(&test_checkpoint(seed)).unwrap()
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png).unwrap();
    buf
}

/// A synthetic road image, cropped to a non-square size that depends on
/// `index`.
pub fn road_image(index: usize) -> RgbImage {
    let cfg = SyntheticConfig::for_size(96);
    let img = render_image(&cfg, index).unwrap().image;
    let w = 96 - (index * 7) as u32 % 33;
    let h = 96 - (index * 13) as u32 % 41;
    image::imageops::crop_imm(&img, 0, 0, w, h).to_image()
}

pub fn road_png(index: usize) -> Vec<u8> {
    encode_png(&road_image(index))
}

/// Starts a server on an ephemeral port; it runs until the runtime stops.
pub async fn spawn(state: AppState) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(server::serve(listener, state, std::future::pending()));
    addr
}

pub async fn spawn_with_model(model: Model, config: ServerConfig) -> SocketAddr {
    spawn(AppState::with_model(config, model)).await
}

pub fn url(addr: SocketAddr, path: &str) -> String {
    format!("http://{addr}{path}")
}
