//! Forward passes of the shared encoder and the three heads.

use super::config::{EncoderDirection, ModelConfig};
use super::params::{layout, Gradients, ModelParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

struct RnnVars {
    w_in: Var,
    w_rec: Var,
    b: Var,
}

/// Parameters of one model placed on a tape as leaves.
pub struct Bound {
    config: ModelConfig,
    names: Vec<(String, Var)>,
    enc: Vec<Vec<RnnVars>>,
    ctc_w: Var,
    ctc_b: Var,
    embed: Var,
    dec_w_in: Var,
    dec_w_rec: Var,
    dec_w_ctx: Var,
    dec_b: Var,
    att_enc: Var,
    att_dec: Var,
    att_b: Var,
    att_v: Var,
    out_state: Var,
    out_ctx: Var,
    out_b: Var,
    disc: Vec<(Var, Var)>,
}

impl Bound {
    pub fn new(params: &ModelParams, tape: &mut Tape, requires_grad: bool) -> Self {
        let cfg = params.config.clone();
        let mut names = Vec::new();
        let mut get = |name: &str| -> Var {
            let t = params.get(name).expect("parameter layout is fixed by config");
            let v = tape.leaf(t.clone(), requires_grad);
            names.push((name.to_string(), v));
            v
        };
        let dirs: &[&str] = match cfg.direction {
            EncoderDirection::Unidirectional => &["fwd"],
            EncoderDirection::Bidirectional => &["fwd", "bwd"],
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                dirs.iter()
                    .map(|dir| RnnVars {
                        w_in: get(&format!("enc.{l}.{dir}.w_in")),
                        w_rec: get(&format!("enc.{l}.{dir}.w_rec")),
                        b: get(&format!("enc.{l}.{dir}.b")),
                    })
                    .collect()
            })
            .collect();
        let ctc_w = get("ctc.w");
        let ctc_b = get("ctc.b");
        let embed = get("dec.embed");
        let dec_w_in = get("dec.w_in");
        let dec_w_rec = get("dec.w_rec");
        let dec_w_ctx = get("dec.w_ctx");
        let dec_b = get("dec.b");
        let att_enc = get("dec.att_enc");
        let att_dec = get("dec.att_dec");
        let att_b = get("dec.att_b");
        let att_v = get("dec.att_v");
        let out_state = get("dec.out_state");
        let out_ctx = get("dec.out_ctx");
        let out_b = get("dec.out_b");
        let disc = (0..cfg.disc_layers)
            .map(|i| (get(&format!("disc.{i}.w")), get(&format!("disc.{i}.b"))))
            .collect();
        debug_assert_eq!(names.len(), layout(&cfg).len());
        Bound {
            config: cfg,
            names,
            enc,
            ctc_w,
            ctc_b,
            embed,
            dec_w_in,
            dec_w_rec,
            dec_w_ctx,
            dec_b,
            att_enc,
            att_dec,
            att_b,
            att_v,
            out_state,
            out_ctx,
            out_b,
            disc,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Add the tape's accumulated parameter gradients into `grads`.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Gradients) {
        for (name, var) in &self.names {
            if let (Some(g), Some(acc)) = (tape.grad(*var), grads.get_mut(name)) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn rnn_pass(tape: &mut Tape, rnn: &RnnVars, input: Var, reverse: bool) -> Result<Var> {
    let projected = tape.matmul(input, rnn.w_in)?;
    let projected = tape.add(projected, rnn.b)?;
    tape.tanh_rnn(projected, rnn.w_rec, reverse)
}

/// Shared encoder: `T × F` features to `T × d` hidden states, no subsampling.
pub fn encode(tape: &mut Tape, m: &Bound, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != m.config.feat_dim || shape[0] == 0 {
        return Err(Error::shape(
            "encode",
            format!("expected T x {}, got {shape:?}", m.config.feat_dim),
        ));
    }
    let mut h = x;
    for layer in &m.enc {
        let fwd = rnn_pass(tape, &layer[0], h, false)?;
        h = match layer.get(1) {
            Some(bwd) => {
                let back = rnn_pass(tape, bwd, h, true)?;
                tape.add(fwd, back)?
            }
            None => fwd,
        };
    }
    Ok(h)
}

fn check_hidden(tape: &Tape, m: &Bound, h: Var, op: &'static str) -> Result<usize> {
    let s = tape.shape(h);
    if s.len() != 2 || s[1] != m.config.enc_hidden {
        return Err(Error::shape(op, format!("hidden states {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::Empty(op));
    }
    Ok(s[0])
}

/// Per-frame log-distribution over words + blank, `T × (V+1)`.
pub fn ctc_head(tape: &mut Tape, m: &Bound, h: Var) -> Result<Var> {
    check_hidden(tape, m, h, "ctc_head")?;
    let logits = tape.matmul(h, m.ctc_w)?;
    let logits = tape.add(logits, m.ctc_b)?;
    tape.log_softmax(logits, 1)
}

/// Accent log-distribution from the mean hidden state through the MLP.
pub fn discriminate(tape: &mut Tape, m: &Bound, h: Var) -> Result<Var> {
    let frames = check_hidden(tape, m, h, "discriminate")?;
    let pool = tape.constant(Tensor::full(vec![1, frames], 1.0 / frames as f64));
    let mut z = tape.matmul(pool, h)?;
    let last = m.disc.len() - 1;
    for (i, &(w, b)) in m.disc.iter().enumerate() {
        z = tape.matmul(z, w)?;
        z = tape.add(z, b)?;
        if i < last {
            z = tape.relu(z)?;
        }
    }
    let z = tape.reshape(z, vec![m.config.n_accents])?;
    tape.log_softmax(z, 0)
}

/// Recurrent attention decoder state after consuming some prefix.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    enc: Var,
    enc_proj: Var,
    state: Var,
    context: Var,
}

/// Output of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Log-distribution over words + eos, length `V+1`.
    pub log_probs: Var,
    /// Attention weights over encoder frames, length `T`.
    pub attention: Var,
}

impl DecoderState {
    pub fn start(tape: &mut Tape, m: &Bound, h: Var) -> Result<Self> {
        check_hidden(tape, m, h, "decoder")?;
        let proj = tape.matmul(h, m.att_enc)?;
        let enc_proj = tape.add(proj, m.att_b)?;
        let state = tape.constant(Tensor::zeros(vec![1, m.config.dec_hidden]));
        let context = tape.constant(Tensor::zeros(vec![1, m.config.enc_hidden]));
        Ok(DecoderState {
            enc: h,
            enc_proj,
            state,
            context,
        })
    }

    /// Feed `token` (a word id, or sos) and predict the next token.
    pub fn step(&mut self, tape: &mut Tape, m: &Bound, token: usize) -> Result<DecoderOutput> {
        let emb = tape.embedding(m.embed, &[token])?;
        let a = tape.matmul(emb, m.dec_w_in)?;
        let b = tape.matmul(self.state, m.dec_w_rec)?;
        let c = tape.matmul(self.context, m.dec_w_ctx)?;
        let pre = tape.add(a, b)?;
        let pre = tape.add(pre, c)?;
        let pre = tape.add(pre, m.dec_b)?;
        let state = tape.tanh(pre)?;

        let q = tape.matmul(state, m.att_dec)?;
        let scores = tape.additive_scores(self.enc_proj, q, m.att_v)?;
        let frames = tape.shape(scores)[0];
        let log_att = tape.log_softmax(scores, 0)?;
        let attention = tape.exp(log_att)?;
        let weights = tape.reshape(attention, vec![1, frames])?;
        let context = tape.matmul(weights, self.enc)?;

        let o1 = tape.matmul(state, m.out_state)?;
        let o2 = tape.matmul(context, m.out_ctx)?;
        let logits = tape.add(o1, o2)?;
        let logits = tape.add(logits, m.out_b)?;
        let logits = tape.reshape(logits, vec![m.config.head_size()])?;
        let log_probs = tape.log_softmax(logits, 0)?;

        self.state = state;
        self.context = context;
        Ok(DecoderOutput { log_probs, attention })
    }
}

/// Next-token log-distribution after `prefix`, which must start with sos.
pub fn decoder_step(tape: &mut Tape, m: &Bound, h: Var, prefix: &[usize]) -> Result<DecoderOutput> {
    let (&first, _) = prefix.split_first().ok_or(Error::Empty("decoder prefix"))?;
    if first != m.config.special() {
        return Err(Error::InvalidConfig("decoder prefix must begin with sos".into()));
    }
    let mut st = DecoderState::start(tape, m, h)?;
    let mut out = None;
    for &tok in prefix {
        out = Some(st.step(tape, m, tok)?);
    }
    Ok(out.expect("prefix is non-empty"))
}
