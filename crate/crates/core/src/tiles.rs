//! Web-Mercator tile indexing, Bing-style quadkeys and satellite tile
//! retrieval with an on-disk cache.
//!
//! The tile math reproduces the reference collection script exactly,
//! including its truncating integer conversion, so tile indices and URLs
//! agree bit-for-bit with tiles fetched by that script.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use image::{ImageFormat, Rgb, RgbImage};
use thiserror::Error;

use crate::raster::write_atomic;

/// Bing tiles are always 256×256.
pub const TILE_SIZE: u32 = 256;
/// Highest latitude representable in square Web-Mercator.
pub const MAX_LATITUDE: f64 = 85.05112878;
pub const MAX_ZOOM: u8 = 30;
pub const DEFAULT_TILE_BASE: &str = "https://ecn.t3.tiles.virtualearth.net/tiles/";

#[derive(Debug, Error)]
pub enum TileError {
    #[error("latitude {0} outside the Web-Mercator range ±{MAX_LATITUDE}")]
    OutOfProjection(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid quadkey {0:?}: digits must be 0-3")]
    InvalidQuadkey(String),
    #[error("tile unavailable: {url} returned HTTP {status}")]
    TileUnavailable { url: String, status: u16 },
    #[error("tile {0} is not cached and the fetcher is offline")]
    NotCached(TileCoord),
    #[error("network error fetching {url}: {reason}")]
    Network { url: String, reason: String },
    #[error("corrupt tile {tile}: {reason}")]
    CorruptTile { tile: TileCoord, reason: String },
    #[error("invalid tile {tile}: expected 256x256, got {width}x{height}")]
    InvalidTile { tile: TileCoord, width: u32, height: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TileError {
    /// True for failures caused by the remote side or the network rather
    /// than bad local data.
    pub fn is_network(&self) -> bool {
        matches!(self, TileError::TileUnavailable { .. } | TileError::Network { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub x: u32,
    pub y: u32,
    pub zoom: u8,
}

impl TileCoord {
    pub fn new(x: u32, y: u32, zoom: u8) -> Result<Self, TileError> {
        if zoom > MAX_ZOOM {
            return Err(TileError::InvalidInput(format!("zoom {zoom} exceeds {MAX_ZOOM}")));
        }
        let n = 1u64 << zoom;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(TileError::InvalidInput(format!("tile ({x}, {y}) outside zoom {zoom} grid")));
        }
        Ok(Self { x, y, zoom })
    }

    pub fn parent(&self) -> Option<TileCoord> {
        (self.zoom > 0).then(|| TileCoord { x: self.x >> 1, y: self.y >> 1, zoom: self.zoom - 1 })
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}_{}", self.zoom, self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Quadkey(String);

impl Quadkey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn zoom(&self) -> u8 {
        self.0.len() as u8
    }
}

impl FromStr for Quadkey {
    type Err = TileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() > MAX_ZOOM as usize || !s.bytes().all(|b| (b'0'..=b'3').contains(&b)) {
            return Err(TileError::InvalidQuadkey(s.to_string()));
        }
        Ok(Quadkey(s.to_string()))
    }
}

impl fmt::Display for Quadkey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn latlon_to_tile(lat: f64, lon: f64, zoom: u8) -> Result<TileCoord, TileError> {
    if !(lat.abs() <= MAX_LATITUDE) {
        return Err(TileError::OutOfProjection(lat));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(TileError::InvalidInput(format!("longitude {lon} outside [-180, 180]")));
    }
    if zoom == 0 || zoom > MAX_ZOOM {
        return Err(TileError::InvalidInput(format!("zoom {zoom} outside [1, {MAX_ZOOM}]")));
    }
    let lat_rad = lat.to_radians();
    let n = (1u64 << zoom) as f64;
    let xf = (lon + 180.0) / 360.0 * n;
    let yf = (1.0 - (lat_rad.tan() + 1.0 / lat_rad.cos()).ln() / std::f64::consts::PI) / 2.0 * n;
    let max = (1u64 << zoom) - 1;
    // Clamping before truncation makes `as` agree with floor.
    let to_index = |v: f64| (v.max(0.0) as u64).min(max) as u32;
    Ok(TileCoord { x: to_index(xf), y: to_index(yf), zoom })
}

pub fn tile_to_quadkey(t: &TileCoord) -> Quadkey {
    let mut key = String::with_capacity(t.zoom as usize);
    for i in (1..=t.zoom).rev() {
        let mask = 1u32 << (i - 1);
        let mut digit = 0u8;
        if t.x & mask != 0 {
            digit += 1;
        }
        if t.y & mask != 0 {
            digit += 2;
        }
        key.push((b'0' + digit) as char);
    }
    Quadkey(key)
}

pub fn quadkey_to_tile(q: &Quadkey) -> TileCoord {
    let zoom = q.zoom();
    let (mut x, mut y) = (0u32, 0u32);
    for (i, b) in q.0.bytes().enumerate() {
        let mask = 1u32 << (zoom as usize - 1 - i);
        let digit = b - b'0';
        if digit & 1 != 0 {
            x |= mask;
        }
        if digit & 2 != 0 {
            y |= mask;
        }
    }
    TileCoord { x, y, zoom }
}

/// Tile URL on the default Bing endpoint.
pub fn tile_url(q: &Quadkey) -> Result<String, TileError> {
    tile_url_with_base(DEFAULT_TILE_BASE, q)
}

/// Same template with a different scheme/host/path prefix (used to point at
/// mirrors or local stub servers).
pub fn tile_url_with_base(base: &str, q: &Quadkey) -> Result<String, TileError> {
    if q.0.is_empty() {
        return Err(TileError::InvalidInput("tile URL needs a nonempty quadkey".into()));
    }
    Ok(format!("{base}a{q}.jpeg?g=1"))
}

/// A decoded 256×256 RGB tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage(RgbImage);

impl TileImage {
    pub fn new(img: RgbImage, tile: TileCoord) -> Result<Self, TileError> {
        if img.width() != TILE_SIZE || img.height() != TILE_SIZE {
            return Err(TileError::InvalidTile { tile, width: img.width(), height: img.height() });
        }
        Ok(Self(img))
    }

    pub fn filled(color: [u8; 3]) -> Self {
        Self(RgbImage::from_pixel(TILE_SIZE, TILE_SIZE, Rgb(color)))
    }

    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    fn decode(bytes: &[u8], tile: TileCoord) -> Result<Self, TileError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| TileError::CorruptTile { tile, reason: e.to_string() })?
            .to_rgb8();
        Self::new(img, tile)
    }
}

pub trait TileFetcher {
    fn fetch(&self, tile: TileCoord) -> Result<TileImage, TileError>;
}

impl<F> TileFetcher for F
where
    F: Fn(TileCoord) -> Result<TileImage, TileError>,
{
    fn fetch(&self, tile: TileCoord) -> Result<TileImage, TileError> {
        self(tile)
    }
}

#[derive(Debug)]
pub struct TileMiss {
    pub tile: TileCoord,
    pub error: TileError,
}

#[derive(Debug)]
pub struct StitchedImage {
    pub image: RgbImage,
    pub center: (f64, f64),
    pub zoom: u8,
    pub grid_size: u32,
    pub misses: Vec<TileMiss>,
}

impl StitchedImage {
    pub fn save_png(&self, path: &Path) -> Result<(), TileError> {
        let mut buf = Cursor::new(Vec::new());
        self.image
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| TileError::InvalidInput(format!("png encoding failed: {e}")))?;
        write_atomic(path, buf.get_ref())?;
        Ok(())
    }
}

/// Downloads the `grid_size × grid_size` block of tiles centered on the tile
/// containing `(lat, lon)` and pastes them into one canvas.
///
/// Failed tiles leave a black region and are recorded in `misses`; they never
/// abort the stitch.
pub fn stitch_grid(
    lat: f64,
    lon: f64,
    zoom: u8,
    grid_size: u32,
    fetcher: &dyn TileFetcher,
) -> Result<StitchedImage, TileError> {
    if grid_size == 0 || grid_size.is_multiple_of(2) {
        return Err(TileError::InvalidInput(format!("grid size must be odd and ≥ 1, got {grid_size}")));
    }
    let center = latlon_to_tile(lat, lon, zoom)?;
    let half = (grid_size / 2) as i64;
    let n = 1i64 << zoom;
    let (cx, cy) = (center.x as i64, center.y as i64);
    if cx - half < 0 || cy - half < 0 || cx + half >= n || cy + half >= n {
        return Err(TileError::InvalidInput(format!(
            "{grid_size}x{grid_size} grid around tile {center} leaves the zoom-{zoom} world"
        )));
    }

    let side = grid_size * TILE_SIZE;
    let mut canvas = RgbImage::new(side, side);
    let mut misses = Vec::new();
    for dx in -half..=half {
        for dy in -half..=half {
            let tile = TileCoord { x: (cx + dx) as u32, y: (cy + dy) as u32, zoom };
            match fetcher.fetch(tile) {
                Ok(img) => {
                    let px = (dx + half) * TILE_SIZE as i64;
                    let py = (dy + half) * TILE_SIZE as i64;
                    image::imageops::replace(&mut canvas, img.image(), px, py);
                }
                Err(error) => misses.push(TileMiss { tile, error }),
            }
        }
    }
    Ok(StitchedImage { image: canvas, center: (lat, lon), zoom, grid_size, misses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Minimal blocking GET, injectable for tests.
pub trait HttpClient: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TileError>;
}

pub struct UreqClient {
    agent: ureq::Agent,
}

impl UreqClient {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqClient {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl HttpClient for UreqClient {
    fn get(&self, url: &str) -> Result<HttpResponse, TileError> {
        let net = |e: ureq::Error| TileError::Network { url: url.to_string(), reason: e.to_string() };
        let mut resp = self.agent.get(url).call().map_err(net)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(net)?;
        Ok(HttpResponse { status, body })
    }
}

pub fn cache_path(cache_dir: &Path, t: &TileCoord) -> PathBuf {
    cache_dir.join(t.zoom.to_string()).join(format!("{}_{}.jpeg", t.x, t.y))
}

/// Cache-first tile lookup. On a miss the tile is downloaded, validated, and
/// the original bytes are stored atomically under `{zoom}/{x}_{y}.jpeg`.
/// With no client the lookup is cache-only.
pub fn fetch_tile(
    t: TileCoord,
    cache_dir: &Path,
    client: Option<&dyn HttpClient>,
    base_url: &str,
) -> Result<TileImage, TileError> {
    let path = cache_path(cache_dir, &t);
    if let Ok(bytes) = std::fs::read(&path) {
        return TileImage::decode(&bytes, t);
    }
    let Some(client) = client else {
        return Err(TileError::NotCached(t));
    };
    let url = tile_url_with_base(base_url, &tile_to_quadkey(&t))?;
    let resp = client.get(&url)?;
    if resp.status != 200 {
        return Err(TileError::TileUnavailable { url, status: resp.status });
    }
    let tile = TileImage::decode(&resp.body, t)?;
    write_atomic(&path, &resp.body)?;
    Ok(tile)
}

/// [`fetch_tile`] bundled with its configuration, usable as a [`TileFetcher`].
pub struct CachedFetcher {
    pub cache_dir: PathBuf,
    pub base_url: String,
    pub client: Option<Box<dyn HttpClient>>,
}

impl CachedFetcher {
    pub fn online(cache_dir: impl Into<PathBuf>, client: Box<dyn HttpClient>) -> Self {
        Self { cache_dir: cache_dir.into(), base_url: DEFAULT_TILE_BASE.to_string(), client: Some(client) }
    }

    pub fn offline(cache_dir: impl Into<PathBuf>) -> Self {
        Self { cache_dir: cache_dir.into(), base_url: DEFAULT_TILE_BASE.to_string(), client: None }
    }

    pub fn with_base_url(mut self, base: impl Into<String>) -> Self {
        self.base_url = base.into();
        self
    }
}

impl TileFetcher for CachedFetcher {
    fn fetch(&self, tile: TileCoord) -> Result<TileImage, TileError> {
        fetch_tile(tile, &self.cache_dir, self.client.as_deref(), &self.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn qk(s: &str) -> Quadkey {
        s.parse().unwrap()
    }

    #[test]
    fn latlon_examples() {
        assert_eq!(latlon_to_tile(0.0, 0.0, 1).unwrap(), TileCoord { x: 1, y: 1, zoom: 1 });
        assert_eq!(latlon_to_tile(0.0, -180.0, 1).unwrap(), TileCoord { x: 0, y: 1, zoom: 1 });
        assert_eq!(latlon_to_tile(85.05112878, -180.0, 1).unwrap(), TileCoord { x: 0, y: 0, zoom: 1 });
        assert_eq!(latlon_to_tile(-85.05112878, 180.0, 3).unwrap(), TileCoord { x: 7, y: 7, zoom: 3 });
    }

    #[test]
    fn latlon_errors() {
        assert!(matches!(latlon_to_tile(86.0, 0.0, 3), Err(TileError::OutOfProjection(_))));
        assert!(matches!(latlon_to_tile(f64::NAN, 0.0, 3), Err(TileError::OutOfProjection(_))));
        assert!(matches!(latlon_to_tile(0.0, 181.0, 3), Err(TileError::InvalidInput(_))));
        assert!(matches!(latlon_to_tile(0.0, 0.0, 0), Err(TileError::InvalidInput(_))));
    }

    #[test]
    fn known_landmark_tile() {
        // Louvre pyramid at zoom 17, cross-checked against the Python script.
        let t = latlon_to_tile(48.8606, 2.3376, 17).unwrap();
        assert_eq!((t.x, t.y), (66387, 45090));
    }

    #[test]
    fn quadkey_examples() {
        assert_eq!(tile_to_quadkey(&TileCoord { x: 0, y: 0, zoom: 1 }).as_str(), "0");
        assert_eq!(tile_to_quadkey(&TileCoord { x: 3, y: 5, zoom: 3 }).as_str(), "213");
        assert_eq!(tile_to_quadkey(&TileCoord { x: 1, y: 0, zoom: 1 }).as_str(), "1");
        assert_eq!(tile_to_quadkey(&TileCoord { x: 0, y: 0, zoom: 0 }).as_str(), "");
        assert_eq!(quadkey_to_tile(&qk("213")), TileCoord { x: 3, y: 5, zoom: 3 });
        assert_eq!(quadkey_to_tile(&qk("0")), TileCoord { x: 0, y: 0, zoom: 1 });
        assert_eq!(quadkey_to_tile(&qk("")), TileCoord { x: 0, y: 0, zoom: 0 });
    }

    #[test]
    fn invalid_quadkeys() {
        assert!(matches!("2140".parse::<Quadkey>(), Err(TileError::InvalidQuadkey(_))));
        assert!(matches!("a".parse::<Quadkey>(), Err(TileError::InvalidQuadkey(_))));
    }

    #[test]
    fn url_template() {
        assert_eq!(tile_url(&qk("213")).unwrap(), "https://ecn.t3.tiles.virtualearth.net/tiles/a213.jpeg?g=1");
        assert_eq!(tile_url(&qk("0")).unwrap(), "https://ecn.t3.tiles.virtualearth.net/tiles/a0.jpeg?g=1");
        let u = tile_url(&qk("02313")).unwrap();
        assert!(u.starts_with("https://ecn.t3.tiles.virtualearth.net/tiles/a02313"));
        assert!(u.ends_with("a02313.jpeg?g=1"));
        assert!(matches!(tile_url(&qk("")), Err(TileError::InvalidInput(_))));
    }

    fn colored(t: TileCoord) -> TileImage {
        TileImage::filled([t.x as u8, t.y as u8, 200])
    }

    #[test]
    fn stitch_single_tile() {
        let out = stitch_grid(10.0, 20.0, 5, 1, &|t: TileCoord| Ok(colored(t))).unwrap();
        let center = latlon_to_tile(10.0, 20.0, 5).unwrap();
        assert_eq!(out.image.dimensions(), (256, 256));
        assert_eq!(&out.image, colored(center).image());
        assert!(out.misses.is_empty());
    }

    #[test]
    fn stitch_places_tiles_by_offset() {
        let out = stitch_grid(10.0, 20.0, 6, 3, &|t: TileCoord| Ok(colored(t))).unwrap();
        let c = latlon_to_tile(10.0, 20.0, 6).unwrap();
        assert_eq!(out.image.dimensions(), (768, 768));
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let expected = [(c.x as i64 + dx) as u8, (c.y as i64 + dy) as u8, 200];
                let (px, py) = (((dx + 1) * 256) as u32, ((dy + 1) * 256) as u32);
                for (u, v) in [(px, py), (px + 255, py + 255), (px + 128, py + 7)] {
                    assert_eq!(out.image.get_pixel(u, v).0, expected);
                }
            }
        }
    }

    #[test]
    fn stitch_tolerates_a_failed_tile() {
        let c = latlon_to_tile(10.0, 20.0, 6).unwrap();
        let bad = TileCoord { x: c.x + 1, y: c.y - 1, zoom: 6 };
        let fetch = |t: TileCoord| {
            if t == bad {
                Err(TileError::TileUnavailable { url: "stub".into(), status: 404 })
            } else {
                Ok(colored(t))
            }
        };
        let out = stitch_grid(10.0, 20.0, 6, 3, &fetch).unwrap();
        assert_eq!(out.misses.len(), 1);
        assert_eq!(out.misses[0].tile, bad);
        for v in 0..256 {
            for u in 512..768 {
                assert_eq!(out.image.get_pixel(u, v).0, [0, 0, 0]);
            }
        }
    }

    #[test]
    fn stitch_rejects_even_and_edge_grids() {
        let ok = |t: TileCoord| Ok(colored(t));
        assert!(matches!(stitch_grid(0.0, 0.0, 4, 4, &ok), Err(TileError::InvalidInput(_))));
        assert!(matches!(stitch_grid(0.0, 0.0, 4, 0, &ok), Err(TileError::InvalidInput(_))));
        assert!(matches!(stitch_grid(0.0, -180.0, 4, 3, &ok), Err(TileError::InvalidInput(_))));
    }

    fn jpeg_bytes(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_pixel(w, h, Rgb([90, 120, 30]));
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Jpeg).unwrap();
        buf.into_inner()
    }

    struct StubClient {
        calls: AtomicUsize,
        urls: Mutex<Vec<String>>,
        response: HttpResponse,
    }

    impl StubClient {
        fn new(status: u16, body: Vec<u8>) -> Self {
            Self { calls: AtomicUsize::new(0), urls: Mutex::new(Vec::new()), response: HttpResponse { status, body } }
        }
    }

    impl HttpClient for StubClient {
        fn get(&self, url: &str) -> Result<HttpResponse, TileError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.urls.lock().unwrap().push(url.to_string());
            Ok(self.response.clone())
        }
    }

    #[test]
    fn fetch_caches_and_reuses() {
        let dir = tempfile::tempdir().unwrap();
        let body = jpeg_bytes(256, 256);
        let stub = StubClient::new(200, body.clone());
        let t = TileCoord { x: 3, y: 5, zoom: 3 };
        fetch_tile(t, dir.path(), Some(&stub), DEFAULT_TILE_BASE).unwrap();
        assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
        assert_eq!(stub.urls.lock().unwrap()[0], "https://ecn.t3.tiles.virtualearth.net/tiles/a213.jpeg?g=1");
        let cached = dir.path().join("3").join("3_5.jpeg");
        assert_eq!(std::fs::read(&cached).unwrap(), body);
        fetch_tile(t, dir.path(), Some(&stub), DEFAULT_TILE_BASE).unwrap();
        assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
        // Warm cache works without any client.
        fetch_tile(t, dir.path(), None, DEFAULT_TILE_BASE).unwrap();
    }

    #[test]
    fn fetch_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let t = TileCoord { x: 1, y: 1, zoom: 2 };
        let not_found = StubClient::new(404, Vec::new());
        let err = fetch_tile(t, dir.path(), Some(&not_found), DEFAULT_TILE_BASE).unwrap_err();
        assert!(matches!(err, TileError::TileUnavailable { status: 404, .. }));
        assert!(err.is_network());

        let garbage = StubClient::new(200, b"not a jpeg".to_vec());
        let err = fetch_tile(t, dir.path(), Some(&garbage), DEFAULT_TILE_BASE).unwrap_err();
        assert!(matches!(err, TileError::CorruptTile { .. }));

        let small = StubClient::new(200, jpeg_bytes(128, 128));
        let err = fetch_tile(t, dir.path(), Some(&small), DEFAULT_TILE_BASE).unwrap_err();
        assert!(matches!(err, TileError::InvalidTile { width: 128, .. }));
        assert!(!cache_path(dir.path(), &t).exists());

        assert!(matches!(fetch_tile(t, dir.path(), None, DEFAULT_TILE_BASE), Err(TileError::NotCached(_))));
    }
}
