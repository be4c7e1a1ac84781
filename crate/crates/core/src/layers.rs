//! Parameter declarations and the small layer wrappers built on them.
//!
//! Each module declares its parameters by name into a [`Decls`] list; the
//! same names are pulled back off the graph during the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vip_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Decl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Default)]
pub struct Decls(pub Vec<Decl>);

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Decls {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(Decl {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// `W: [i, o]` with LeCun-normal init, optional zero bias.
    pub fn linear(&mut self, prefix: &str, i: usize, o: usize, bias: bool) {
        self.add(format!("{prefix}.w"), &[i, o], Init::Normal((i as f64).powf(-0.5)));
        if bias {
            self.add(format!("{prefix}.b"), &[o], Init::Zeros);
        }
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zero_linear(&mut self, prefix: &str, i: usize, o: usize) {
        self.add(format!("{prefix}.w"), &[i, o], Init::Zeros);
        self.add(format!("{prefix}.b"), &[o], Init::Zeros);
    }

    /// Convolution kernel `[..kernel, ci, co]` plus zero bias.
    pub fn conv(&mut self, prefix: &str, kernel: &[usize], ci: usize, co: usize) {
        let fan_in = kernel.iter().product::<usize>() * ci;
        let mut shape = kernel.to_vec();
        shape.extend([ci, co]);
        self.add(format!("{prefix}.w"), &shape, Init::Normal((fan_in as f64).powf(-0.5)));
        self.add(format!("{prefix}.b"), &[co], Init::Zeros);
    }

    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), &[c], Init::Ones);
        self.add(format!("{prefix}.beta"), &[c], Init::Zeros);
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    /// Materializes the declarations. Each tensor draws from its own stream
    /// keyed by name, so adding or removing a module leaves the others
    /// untouched.
    pub fn build(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for d in &self.0 {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::ones(&d.shape),
                Init::Normal(std) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&d.name));
                    Tensor::rand_normal(&d.shape, std, &mut rng)
                }
            };
            store.insert(d.name.clone(), t)?;
        }
        Ok(store)
    }
}

pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    Ok(g.linear(x, w, Some(b))?)
}

pub fn linear_nobias(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    Ok(g.linear(x, w, None)?)
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

pub fn group_norm(g: &mut Graph, x: Var, prefix: &str, groups: usize) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    Ok(g.group_norm(x, gamma, beta, groups)?)
}

/// Same-padded stride-1 2D convolution of `[H, W, C]` with bias.
pub fn conv2d_same(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let k = g.shape(w)[0];
    let y = g.conv2d(x, w, [1, 1], [k / 2, k / 2])?;
    Ok(g.add_suffix(y, b)?)
}
