//! GRU and LSTM cells and the stacked bidirectional LSTM.
//!
//! Cells operate on `1×n` row states so every step stays inside the rank-2
//! kernel set. Gates are fused into single wide matmuls and separated with
//! slices.

use indexmap::IndexMap;

use crate::diffcore::{ParamStore, RngStream, StoreError, Tensor, Var};

use super::{bound_var, uniform_init, NnError};

/// GRU cell with fused (r, z, n) gate weights.
///
/// `wx: in×3h`, `wh: h×3h`, `bx, bh: 1×3h`. The candidate gate applies the
/// reset gate to the recurrent contribution before the tanh.
#[derive(Clone)]
pub struct GruCell {
    pub wx: Var,
    pub wh: Var,
    pub bx: Var,
    pub bh: Var,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        stream: &mut RngStream,
    ) -> Result<(), StoreError> {
        let bound = 1.0 / (hidden as f64).sqrt();
        store.insert(
            &format!("{prefix}.wx"),
            uniform_init(&[input, 3 * hidden], bound, stream),
        )?;
        store.insert(
            &format!("{prefix}.wh"),
            uniform_init(&[hidden, 3 * hidden], bound, stream),
        )?;
        store.insert(&format!("{prefix}.bx"), Tensor::zeros(&[1, 3 * hidden]))?;
        store.insert(&format!("{prefix}.bh"), Tensor::zeros(&[1, 3 * hidden]))?;
        Ok(())
    }

    pub fn bind(
        map: &IndexMap<String, Var>,
        prefix: &str,
        hidden: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            wx: bound_var(map, &format!("{prefix}.wx"))?,
            wh: bound_var(map, &format!("{prefix}.wh"))?,
            bx: bound_var(map, &format!("{prefix}.bx"))?,
            bh: bound_var(map, &format!("{prefix}.bh"))?,
            hidden,
        })
    }

    /// One step: `x_t` is `1×in`, `h` is `1×h`; returns the next state.
    pub fn step(&self, x: &Var, h: &Var) -> Result<Var, NnError> {
        let hsz = self.hidden;
        let gx = x.matmul(&self.wx, false, false)?.add(&self.bx)?;
        let gh = h.matmul(&self.wh, false, false)?.add(&self.bh)?;
        let rz = gx
            .slice(1, 0, 2 * hsz)?
            .add(&gh.slice(1, 0, 2 * hsz)?)?
            .sigmoid();
        let r = rz.slice(1, 0, hsz)?;
        let z = rz.slice(1, hsz, hsz)?;
        let n = gx
            .slice(1, 2 * hsz, hsz)?
            .add(&r.mul(&gh.slice(1, 2 * hsz, hsz)?)?)?
            .tanh();
        let ones = x.graph().constant(Tensor::full(&[1, hsz], 1.0));
        let keep = z.mul(h)?;
        let update = ones.sub(&z)?.mul(&n)?;
        Ok(keep.add(&update)?)
    }

    pub fn zero_state(&self, graph: &crate::diffcore::Graph) -> Var {
        graph.constant(Tensor::zeros(&[1, self.hidden]))
    }
}

/// LSTM cell with fused (i, f, g, o) gate weights.
///
/// `wx: in×4h`, `wh: h×4h`, `b: 1×4h`; the forget-gate bias slice is
/// initialized to +1.
#[derive(Clone)]
pub struct LstmCell {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        stream: &mut RngStream,
    ) -> Result<(), StoreError> {
        let bound = 1.0 / (hidden as f64).sqrt();
        store.insert(
            &format!("{prefix}.wx"),
            uniform_init(&[input, 4 * hidden], bound, stream),
        )?;
        store.insert(
            &format!("{prefix}.wh"),
            uniform_init(&[hidden, 4 * hidden], bound, stream),
        )?;
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        store.insert(&format!("{prefix}.b"), bias)?;
        Ok(())
    }

    pub fn bind(
        map: &IndexMap<String, Var>,
        prefix: &str,
        hidden: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            wx: bound_var(map, &format!("{prefix}.wx"))?,
            wh: bound_var(map, &format!("{prefix}.wh"))?,
            b: bound_var(map, &format!("{prefix}.b"))?,
            hidden,
        })
    }

    /// One step over `(h, c)`; returns the next `(h, c)`.
    pub fn step(&self, x: &Var, h: &Var, c: &Var) -> Result<(Var, Var), NnError> {
        let hsz = self.hidden;
        let gates = x
            .matmul(&self.wx, false, false)?
            .add(&h.matmul(&self.wh, false, false)?)?
            .add(&self.b)?;
        let i = gates.slice(1, 0, hsz)?.sigmoid();
        let f = gates.slice(1, hsz, hsz)?.sigmoid();
        let g = gates.slice(1, 2 * hsz, hsz)?.tanh();
        let o = gates.slice(1, 3 * hsz, hsz)?.sigmoid();
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

/// Stacked bidirectional LSTM; position `t` of the output concatenates the
/// top layer's forward state at `t` with its backward state at `t`.
#[derive(Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        stream: &mut RngStream,
    ) -> Result<(), StoreError> {
        for l in 0..layers {
            let in_size = if l == 0 { input } else { 2 * hidden };
            LstmCell::init(store, &format!("{prefix}.l{l}.fwd"), in_size, hidden, stream)?;
            LstmCell::init(store, &format!("{prefix}.l{l}.bwd"), in_size, hidden, stream)?;
        }
        Ok(())
    }

    pub fn bind(
        map: &IndexMap<String, Var>,
        prefix: &str,
        hidden: usize,
        layers: usize,
    ) -> Result<Self, NnError> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            out.push((
                LstmCell::bind(map, &format!("{prefix}.l{l}.fwd"), hidden)?,
                LstmCell::bind(map, &format!("{prefix}.l{l}.bwd"), hidden)?,
            ));
        }
        Ok(Self {
            layers: out,
            hidden,
        })
    }

    /// Maps a `T×d` embedding sequence to `T×2h` contextual states.
    pub fn apply(&self, emb: &Var) -> Result<Var, NnError> {
        let t = emb.shape()[0];
        if t == 0 {
            return Err(NnError::EmptySequence("bilstm"));
        }
        let graph = emb.graph().clone();
        let mut rows: Vec<Var> = (0..t).map(|i| emb.slice(0, i, 1)).collect::<Result<_, _>>()?;
        for (fwd, bwd) in &self.layers {
            let zero_h = graph.constant(Tensor::zeros(&[1, self.hidden]));
            let zero_c = zero_h.clone();

            let mut fwd_states = Vec::with_capacity(t);
            let (mut h, mut c) = (zero_h.clone(), zero_c.clone());
            for row in &rows {
                let (nh, nc) = fwd.step(row, &h, &c)?;
                fwd_states.push(nh.clone());
                h = nh;
                c = nc;
            }

            let mut bwd_states = vec![None; t];
            let (mut h, mut c) = (zero_h, zero_c);
            for i in (0..t).rev() {
                let (nh, nc) = bwd.step(&rows[i], &h, &c)?;
                bwd_states[i] = Some(nh.clone());
                h = nh;
                c = nc;
            }

            rows = fwd_states
                .iter()
                .zip(bwd_states.iter())
                .map(|(f, b)| graph.concat(&[f, b.as_ref().expect("filled")], 1))
                .collect::<Result<_, _>>()?;
        }
        let refs: Vec<&Var> = rows.iter().collect();
        Ok(if refs.len() == 1 {
            rows[0].clone()
        } else {
            graph.concat(&refs, 0)?
        })
    }
}
