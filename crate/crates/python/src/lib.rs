//! Python bindings: features, CTC loss, scoring, the tokenizer, synthetic data
//! and checkpoint inference.

use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tapasr::autograd::Tape;
use tapasr::data::{synth_generate, DomainSpec};
use tapasr::experiments::ablate::relative_improvement as rel_improvement;
use tapasr::experiments::AnyModel;
use tapasr::frontend::{apply_specaug, extract, FrontendConfig, SpecAugPolicy};
use tapasr::nnet::checkpoint::Checkpoint;
use tapasr::nnet::ForwardCtx;
use tapasr::objective::{joint_beam_decode, BeamOptions};
use tapasr::scoring::{self, ScoredPair, Unit};
use tapasr::tensor::Mat;

fn err(e: tapasr::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn unit(name: &str) -> PyResult<Unit> {
    match name {
        "word" => Ok(Unit::Word),
        "char" => Ok(Unit::Char),
        _ => Err(PyValueError::new_err(format!("unit must be 'word' or 'char', got {name:?}"))),
    }
}

fn to_mat<T: numpy::Element + Copy>(a: &PyReadonlyArray2<T>) -> Mat<T>
where
    T: tapasr::tensor::Scalar,
{
    let v = a.as_array();
    Mat::from_fn(v.nrows(), v.ncols(), |r, c| v[[r, c]])
}

fn to_py<'py, T: numpy::Element + tapasr::tensor::Scalar>(py: Python<'py>, m: &Mat<T>) -> PyResult<Bound<'py, PyArray2<T>>> {
    numpy::ndarray::Array2::from_shape_vec(m.shape(), m.data().to_vec())
        .map(|a| a.into_pyarray(py))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Log-mel features (frames x n_mels, plus 3 pitch columns with `use_pitch`).
#[pyfunction]
#[pyo3(signature = (samples, n_mels=80, use_pitch=false, mean_norm=true))]
fn log_mel<'py>(
    py: Python<'py>,
    samples: PyReadonlyArray1<i16>,
    n_mels: usize,
    use_pitch: bool,
    mean_norm: bool,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let cfg = FrontendConfig {
        n_mels,
        use_pitch,
        mean_norm,
    };
    let wave = samples.as_array().to_vec();
    let f = extract(&wave, &cfg).map_err(err)?;
    to_py(py, &f.values)
}

/// Two frequency and two time masks of width at most `freq_width` / `time_width`, filled with 0.
#[pyfunction]
fn specaug<'py>(
    py: Python<'py>,
    features: PyReadonlyArray2<f32>,
    freq_width: usize,
    time_width: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let out = apply_specaug(&to_mat(&features), &SpecAugPolicy::new(freq_width, time_width), seed);
    to_py(py, &out)
}

/// CTC negative log-likelihood of `target` under row-normalised `log_probs` (blank = 0).
/// Unreachable targets give `inf`.
#[pyfunction]
fn ctc_loss(log_probs: PyReadonlyArray2<f64>, target: Vec<usize>) -> PyResult<f64> {
    Ok(tapasr::objective::ctc_loss(&to_mat(&log_probs), &target).map_err(err)?.value)
}

/// (substitutions, deletions, insertions) between two strings.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, unit="word"))]
fn edit_distance(reference: &str, hypothesis: &str, unit: &str) -> PyResult<(usize, usize, usize)> {
    let u = self::unit(unit)?;
    let c = scoring::edit_distance(&u.tokens(reference), &u.tokens(hypothesis));
    Ok((c.substitutions, c.deletions, c.insertions))
}

/// Pooled error rate in percent over parallel reference/hypothesis lists.
#[pyfunction]
#[pyo3(signature = (references, hypotheses, unit="word"))]
fn score_corpus(references: Vec<String>, hypotheses: Vec<String>, unit: &str) -> PyResult<f64> {
    if references.len() != hypotheses.len() {
        return Err(PyValueError::new_err("references and hypotheses differ in length"));
    }
    let ids: Vec<String> = (0..references.len()).map(|i| i.to_string()).collect();
    let pairs = ids.iter().zip(references.iter().zip(&hypotheses)).map(|(id, (r, h))| ScoredPair {
        utt_id: id,
        reference: r,
        hypothesis: h,
    });
    Ok(scoring::score_corpus(pairs, self::unit(unit)?).map_err(err)?.wer)
}

#[pyfunction]
fn relative_improvement(baseline: f64, wer: f64) -> PyResult<f64> {
    rel_improvement(baseline, wer).map_err(err)
}

/// Synthetic utterances from the "source" or "target" domain as
/// `(utt_id, transcript, samples)` tuples.
#[pyfunction]
fn synth<'py>(py: Python<'py>, domain: &str, n: usize, seed: u64) -> PyResult<Vec<(String, String, Bound<'py, PyArray1<i16>>)>> {
    let spec = match domain {
        "source" => DomainSpec::source(),
        "target" => DomainSpec::target(),
        _ => return Err(PyValueError::new_err(format!("unknown domain {domain:?}"))),
    };
    synth_generate(&spec, n, seed)
        .map_err(err)?
        .into_iter()
        .map(|u| {
            let s = u.samples().map_err(err)?;
            Ok((u.utt_id, u.transcript, s.into_pyarray(py)))
        })
        .collect()
}

#[pyclass]
struct Tokenizer(tapasr::data::Tokenizer);

#[pymethods]
impl Tokenizer {
    #[new]
    fn new(transcripts: Vec<String>) -> Self {
        Tokenizer(tapasr::data::Tokenizer::build(&transcripts))
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn symbols(&self) -> Vec<String> {
        self.0.symbols().to_vec()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.0.encode(text).ids
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.0.decode(&ids)
    }
}

/// A trained checkpoint (plain or tapped) loaded for inference.
#[pyclass]
struct Model {
    model: AnyModel<f32>,
    tokenizer: tapasr::data::Tokenizer,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::<f32>::load(path.as_ref()).map_err(err)?;
        let model = AnyModel::from_checkpoint(&ckpt).map_err(err)?;
        Ok(Model {
            model,
            tokenizer: ckpt.tokenizer,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.model.asr().vocab_size()
    }

    fn tokenizer(&self) -> Tokenizer {
        Tokenizer(self.tokenizer.clone())
    }

    /// Final encoder output (subsampled frames x d_model) in eval mode.
    fn encode<'py>(&self, py: Python<'py>, features: PyReadonlyArray2<f32>) -> PyResult<Bound<'py, PyArray2<f32>>> {
        let asr = self.model.asr();
        let mut tape = Tape::new(asr.params(), false);
        let out = asr.encode(&mut tape, &to_mat(&features), &mut ForwardCtx::eval()).map_err(err)?;
        to_py(py, tape.value(out))
    }

    /// Joint CTC/attention beam search; returns the transcript.
    #[pyo3(signature = (features, beam=10, ctc_weight=0.3))]
    fn decode(&self, features: PyReadonlyArray2<f32>, beam: usize, ctc_weight: f64) -> PyResult<String> {
        let hyp = joint_beam_decode(self.model.asr(), &to_mat(&features), &BeamOptions::new(beam, ctc_weight)).map_err(err)?;
        Ok(self.tokenizer.decode(&hyp.tokens))
    }
}

#[pymodule]
fn tapasr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(specaug, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(score_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<Model>()?;
    Ok(())
}
