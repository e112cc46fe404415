//! Client side of the model-serving process protocol.
//!
//! A bridge process reads one JSON request per line on stdin and answers
//! each with exactly one JSON line on stdout. Tensors travel as base64 of
//! little-endian `f32` in row-major order next to an explicit shape; masks
//! travel as base64 bytes (0 or 1 per pixel).
//!
//! [`serve`] is a reference server over any [`ModelAdapter`], used to expose
//! the built-in micro model through the same protocol and to test the client.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_class, FeatureBundle, FeatureShape, ModelAdapter, ProbMap};
use crate::tensor::{BinaryMask, Image, CHANNELS};

/// Per-pixel sum-to-one tolerance for probabilities that crossed the wire
/// as `f32`.
pub const PROB_TOLERANCE: f64 = 1e-4;

/// A dense `f32` tensor on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Bridge(format!("tensor shape {shape:?} overflows")))
}

impl WireTensor {
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        if shape_len(&shape)? != values.len() {
            return Err(Error::Bridge(format!("{} values do not fill shape {shape:?}", values.len())));
        }
        let mut bytes = Vec::with_capacity(4 * values.len());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(Self { shape, data: B64.encode(bytes) })
    }

    /// Rounds each value to the nearest `f32`.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        Self::from_f32(shape, &narrowed)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        let bytes = B64.decode(&self.data).map_err(|e| Error::Bridge(format!("bad base64 tensor: {e}")))?;
        let n = shape_len(&self.shape)?;
        if bytes.len() != 4 * n {
            return Err(Error::Bridge(format!(
                "tensor payload has {} bytes, shape {:?} needs {}",
                bytes.len(),
                self.shape,
                4 * n
            )));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        Ok(self.to_f32()?.into_iter().map(f64::from).collect())
    }

    fn expect_shape(&self, what: &str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Bridge(format!("{what} has shape {:?}, expected {expected:?}", self.shape)));
        }
        Ok(())
    }
}

/// A binary mask on the wire, shape `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMask {
    pub shape: [usize; 2],
    pub data: String,
}

impl WireMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
        Self { shape: [mask.height(), mask.width()], data: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let bytes = B64.decode(&self.data).map_err(|e| Error::Bridge(format!("bad base64 mask: {e}")))?;
        let [h, w] = self.shape;
        if bytes.len() != h * w {
            return Err(Error::Bridge(format!("mask payload has {} bytes, shape needs {}", bytes.len(), h * w)));
        }
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Bridge("mask bytes must be 0 or 1".into()));
        }
        BinaryMask::from_bools(h, w, bytes.into_iter().map(|b| b == 1).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Hello {
        /// `[height, width]` of upcoming inputs, so the server can report
        /// the feature shape.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_shape: Option<[usize; 2]>,
    },
    Predict {
        image: WireTensor,
    },
    Grad {
        image: WireTensor,
        class_id: usize,
        mask: WireMask,
    },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Response {
    Hello {
        num_classes: usize,
        feature_layer: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_shape: Option<[usize; 3]>,
    },
    Predict {
        probs: WireTensor,
    },
    Grad {
        activations: WireTensor,
        gradient: WireTensor,
    },
    Bye,
    Error {
        message: String,
    },
}

pub fn encode_image(image: &Image) -> Result<WireTensor> {
    WireTensor::from_f64(vec![CHANNELS, image.height(), image.width()], image.data())
}

/// Values are clamped into `[0, 1]`, which `f32` rounding can step out of.
pub fn decode_image(tensor: &WireTensor) -> Result<Image> {
    match tensor.shape[..] {
        [c, h, w] if c == CHANNELS => Image::from_clamped(h, w, tensor.to_f64()?),
        _ => Err(Error::Bridge(format!("image tensor has shape {:?}, expected [3, H, W]", tensor.shape))),
    }
}

fn write_message<T: Serialize>(out: &mut impl Write, msg: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, msg)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Model adapter backed by a bridge connection.
pub struct BridgeAdapter<R = BufReader<ChildStdout>, W: Write = ChildStdin> {
    reader: R,
    writer: W,
    num_classes: usize,
    feature_layer: String,
    child: Option<Child>,
    line: String,
}

impl<R: BufRead, W: Write> BridgeAdapter<R, W> {
    /// Performs the `hello` handshake over an established stream pair.
    pub fn connect(reader: R, writer: W) -> Result<Self> {
        let mut adapter = Self { reader, writer, num_classes: 0, feature_layer: String::new(), child: None, line: String::new() };
        match adapter.call(&Request::Hello { input_shape: None })? {
            Response::Hello { num_classes, feature_layer, .. } => {
                if num_classes < 2 {
                    return Err(Error::Bridge(format!("server reports {num_classes} classes")));
                }
                adapter.num_classes = num_classes;
                adapter.feature_layer = feature_layer;
                Ok(adapter)
            }
            other => Err(unexpected("hello", &other)),
        }
    }

    pub fn feature_layer(&self) -> &str {
        &self.feature_layer
    }

    /// Sends one request and reads its response. An `error` response becomes
    /// [`Error::Bridge`].
    pub fn call(&mut self, request: &Request) -> Result<Response> {
        write_message(&mut self.writer, request)?;
        self.line.clear();
        if self.reader.read_line(&mut self.line)? == 0 {
            return Err(Error::Bridge("server closed the connection".into()));
        }
        match serde_json::from_str(self.line.trim_end())
            .map_err(|e| Error::Bridge(format!("malformed response: {e}")))?
        {
            Response::Error { message } => Err(Error::Bridge(message)),
            response => Ok(response),
        }
    }

    /// Asks the server for the feature shape at a given input size.
    pub fn query_feature_shape(&mut self, height: usize, width: usize) -> Result<Option<FeatureShape>> {
        match self.call(&Request::Hello { input_shape: Some([height, width]) })? {
            Response::Hello { feature_shape, .. } => {
                Ok(feature_shape.map(|[channels, height, width]| FeatureShape { channels, height, width }))
            }
            other => Err(unexpected("hello", &other)),
        }
    }

    /// Ends the session with a `bye` exchange and waits for a spawned server
    /// to exit.
    pub fn close(mut self) -> Result<()> {
        let reply = self.call(&Request::Bye);
        self.reap(Duration::from_secs(5));
        match reply? {
            Response::Bye => Ok(()),
            other => Err(unexpected("bye", &other)),
        }
    }

    fn reap(&mut self, grace: Duration) {
        if let Some(mut child) = self.child.take() {
            let start = Instant::now();
            while start.elapsed() < grace {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            log::warn!("bridge process did not exit after bye; killing it");
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl BridgeAdapter {
    /// Launches `command` (program followed by arguments) with piped stdio
    /// and performs the handshake.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) =
            command.split_first().ok_or_else(|| Error::invalid("bridge command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot launch {program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));
        match BridgeAdapter::connect(stdout, stdin) {
            Ok(mut adapter) => {
                adapter.child = Some(child);
                Ok(adapter)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }
}

impl<R, W: Write> Drop for BridgeAdapter<R, W> {
    fn drop(&mut self) {
        if self.child.is_some() {
            // Best effort: a conforming server exits after bye.
            let _ = write_message(&mut self.writer, &Request::Bye);
            let mut child = self.child.take().expect("checked above");
            let start = Instant::now();
            while start.elapsed() < Duration::from_secs(2) {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn unexpected(wanted: &str, got: &Response) -> Error {
    let kind = serde_json::to_value(got)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string))
        .unwrap_or_default();
    Error::Bridge(format!("expected a {wanted} response, got {kind}"))
}

impl<R: BufRead, W: Write> ModelAdapter for BridgeAdapter<R, W> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&mut self, image: &Image) -> Result<ProbMap> {
        let (h, w) = (image.height(), image.width());
        match self.call(&Request::Predict { image: encode_image(image)? })? {
            Response::Predict { probs } => {
                probs.expect_shape("probability tensor", &[self.num_classes, h, w])?;
                ProbMap::new(self.num_classes, h, w, probs.to_f64()?, PROB_TOLERANCE)
                    .map_err(|e| Error::Bridge(e.to_string()))
            }
            other => Err(unexpected("predict", &other)),
        }
    }

    fn features_and_gradient(&mut self, image: &Image, class: usize, mask: &BinaryMask) -> Result<FeatureBundle> {
        check_class(self, class)?;
        mask.check_matches(image.height(), image.width())?;
        if mask.popcount() == 0 {
            return Err(Error::EmptyRegion("target mask has no pixels".into()));
        }
        let request = Request::Grad { image: encode_image(image)?, class_id: class, mask: WireMask::encode(mask) };
        match self.call(&request)? {
            Response::Grad { activations, gradient } => {
                let shape = match activations.shape[..] {
                    [channels, height, width] => FeatureShape { channels, height, width },
                    _ => return Err(Error::Bridge(format!("activation shape {:?} is not [C, h, w]", activations.shape))),
                };
                gradient.expect_shape("gradient", &activations.shape)?;
                FeatureBundle::new(shape, activations.to_f64()?, gradient.to_f64()?)
                    .map_err(|e| Error::Bridge(e.to_string()))
            }
            other => Err(unexpected("grad", &other)),
        }
    }
}

fn handle(adapter: &mut dyn ModelAdapter, feature_layer: &str, request: Request) -> Result<Response> {
    Ok(match request {
        Request::Hello { input_shape } => Response::Hello {
            num_classes: adapter.num_classes(),
            feature_layer: feature_layer.to_string(),
            feature_shape: input_shape
                .and_then(|[h, w]| adapter.feature_shape(h, w))
                .map(|s| [s.channels, s.height, s.width]),
        },
        Request::Predict { image } => {
            let image = decode_image(&image)?;
            let probs = adapter.predict(&image)?;
            Response::Predict {
                probs: WireTensor::from_f64(vec![probs.classes(), probs.height(), probs.width()], probs.data())?,
            }
        }
        Request::Grad { image, class_id, mask } => {
            let image = decode_image(&image)?;
            let mask = mask.decode()?;
            let bundle = adapter.features_and_gradient(&image, class_id, &mask)?;
            let shape = vec![bundle.shape.channels, bundle.shape.height, bundle.shape.width];
            Response::Grad {
                activations: WireTensor::from_f64(shape.clone(), &bundle.activations)?,
                gradient: WireTensor::from_f64(shape, &bundle.gradient)?,
            }
        }
        Request::Bye => Response::Bye,
    })
}

/// Serves `adapter` until `bye` or end of input. Malformed or failing
/// requests get an `error` response and the loop continues.
pub fn serve(
    adapter: &mut dyn ModelAdapter,
    feature_layer: &str,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request = serde_json::from_str::<Request>(&line);
        let is_bye = matches!(request, Ok(Request::Bye));
        let response = request
            .map_err(|e| Error::Bridge(format!("malformed request: {e}")))
            .and_then(|r| handle(adapter, feature_layer, r))
            .unwrap_or_else(|e| Response::Error { message: e.to_string() });
        write_message(&mut writer, &response)?;
        if is_bye {
            break;
        }
    }
    Ok(())
}
