//! Model documents: versioned JSON with every number written to 17
//! significant digits so that saving and loading is exact.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::hw::HwModel;
use crate::neural_ss::NeuralStateSpaceModel;
use crate::nlarx::NlarxModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    NeuralStateSpace(NeuralStateSpaceModel),
    Nlarx(NlarxModel),
    HammersteinWiener(HwModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::NeuralStateSpace(_) => "neural_state_space",
            Model::Nlarx(_) => "nlarx",
            Model::HammersteinWiener(_) => "hammerstein_wiener",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Model::NeuralStateSpace(m) => m.params(),
            Model::Nlarx(m) => m.mapping().params(),
            Model::HammersteinWiener(m) => m.params(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    kind: String,
    model: serde_json::Value,
}

/// Pretty JSON whose floats use `{:.16e}`.
struct ExactFormatter(PrettyFormatter<'static>);

impl Formatter for ExactFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(crate::fmt_num(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON of any value with exact floats. Non-finite floats come out
/// as `null`.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFormatter(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Document(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn model_to_json(model: &Model) -> Result<String> {
    let inner = match model {
        Model::NeuralStateSpace(m) => serde_json::to_value(m),
        Model::Nlarx(m) => serde_json::to_value(m),
        Model::HammersteinWiener(m) => serde_json::to_value(m),
    }
    .map_err(|e| Error::Document(e.to_string()))?;
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("{} parameters", model.kind())));
    }
    to_json(&Envelope {
        format_version: FORMAT_VERSION,
        kind: model.kind().to_string(),
        model: inner,
    })
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Document(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            env.format_version
        )));
    }
    let doc = |e: serde_json::Error| Error::Document(format!("{}: {e}", env.kind));
    let model = match env.kind.as_str() {
        "neural_state_space" => {
            let m: NeuralStateSpaceModel = serde_json::from_value(env.model).map_err(doc)?;
            m.validate()?;
            Model::NeuralStateSpace(m)
        }
        "nlarx" => {
            let m: NlarxModel = serde_json::from_value(env.model).map_err(doc)?;
            m.validate()?;
            Model::Nlarx(m)
        }
        "hammerstein_wiener" => {
            let m: HwModel = serde_json::from_value(env.model).map_err(doc)?;
            m.validate()?;
            Model::HammersteinWiener(m)
        }
        other => return Err(Error::Document(format!("unknown model kind {other:?}"))),
    };
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::{LinearSsBlock, StaticNonlinearity};
    use crate::mlp::Activation;
    use crate::neural_ss::create_nss;
    use crate::nlarx::MappingSpec;
    use crate::regressors::RegressorSpec;
    use nalgebra::DMatrix;

    fn roundtrip(m: Model) {
        let text = model_to_json(&m).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_json(&back).unwrap(), text);
    }

    #[test]
    fn all_kinds_roundtrip_exactly() {
        roundtrip(Model::NeuralStateSpace(create_nss(3, 2, 4, 0.1, None).unwrap()));
        roundtrip(Model::NeuralStateSpace(create_nss(20, 1, 20, 0.2, Some(7)).unwrap()));
        let specs = vec![RegressorSpec::linear(&["y1", "u1"], &[&[1, 2], &[1]])];
        let m = NlarxModel::new("y1", &["u1".to_string()], 1.0, specs, &MappingSpec::SigmoidNetwork { units: 4 }, 5).unwrap();
        roundtrip(Model::Nlarx(m));
        let blk = LinearSsBlock::new(
            DMatrix::from_row_slice(1, 1, &[0.1 + 0.2]),
            DMatrix::from_row_slice(1, 1, &[1.0 / 3.0]),
            DMatrix::from_row_slice(1, 1, &[std::f64::consts::PI]),
            DMatrix::zeros(1, 1),
            0.05,
        )
        .unwrap();
        let hw = HwModel::new(blk)
            .unwrap()
            .with_output_nl(vec![StaticNonlinearity::network(&[5, 5], Activation::Tanh, 1).unwrap()])
            .unwrap();
        roundtrip(Model::HammersteinWiener(hw));
    }

    #[test]
    fn numbers_have_17_digits() {
        let text = to_json(&vec![0.1_f64, -2.0]).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        assert!(text.contains("-2.0000000000000000e0"));
    }

    #[test]
    fn rejects_bad_documents() {
        let m = Model::NeuralStateSpace(create_nss(1, 1, 1, 1.0, None).unwrap());
        let text = model_to_json(&m).unwrap();
        let v2 = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(model_from_json(&v2), Err(Error::Document(_))));
        let kind = text.replacen("neural_state_space", "transfer_function", 1);
        assert!(matches!(model_from_json(&kind), Err(Error::Document(_))));
        let extra = text.replacen('{', "{\"extra\": 1,", 1);
        assert!(model_from_json(&extra).is_err());
        let mut bad = create_nss(1, 1, 1, 1.0, None).unwrap();
        let mut p = bad.params();
        p[0] = f64::NAN;
        bad.set_params(&p).unwrap();
        assert!(matches!(model_to_json(&Model::NeuralStateSpace(bad)), Err(Error::NonFiniteValue(_))));
    }
}
