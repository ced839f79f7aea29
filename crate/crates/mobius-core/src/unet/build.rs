//! Deterministic model construction.
//!
//! Every parameter draws from a substream keyed by its own name, so builds
//! are byte-identical for a seed regardless of construction order. Temporal
//! output projections (the last temporal conv and the temporal-attention
//! out-projection) start at zero, which makes a fresh parallel model compute
//! exactly its spatial sub-network.

use crate::param::{ParamStore, Parameter, ParamTag};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

use super::config::{BlockSpec, UNetConfig, SC_UNITS};

enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Identity pass-through of the first `c` input channels of a conv
    /// weight [c, 2c, k, k]; used for the fusion conv so a fresh parallel
    /// model forwards its spatial stream unchanged.
    FuseIdentity { kernel: usize },
}

fn make(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Normal(sigma) => {
            let mut rng = Rng::stream(seed, fnv1a(name.as_bytes()));
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            rng.fill_normal(&mut data);
            for v in data.iter_mut() {
                *v *= sigma;
            }
            Tensor::new(shape.to_vec(), data).unwrap()
        }
        Init::FuseIdentity { kernel } => {
            let (c_out, c_in) = (shape[0], shape[1]);
            let mid = kernel / 2;
            let mut data = vec![0.0; c_out * c_in * kernel * kernel];
            for c in 0..c_out {
                data[((c * c_in + c) * kernel + mid) * kernel + mid] = 1.0;
            }
            Tensor::new(shape.to_vec(), data).unwrap()
        }
    }
}

pub(super) struct Builder<'a> {
    pub cfg: &'a UNetConfig,
    pub store: ParamStore,
}

impl<'a> Builder<'a> {
    pub fn new(cfg: &'a UNetConfig) -> Self {
        Builder {
            cfg,
            store: ParamStore::new(),
        }
    }

    fn put(&mut self, name: String, shape: &[usize], init: Init, tag: ParamTag) {
        let value = make(self.cfg.seed, &name, shape, init);
        self.store.insert(Parameter::new(name, value, tag));
    }

    fn conv2d(&mut self, prefix: &str, c_out: usize, c_in: usize, tag: ParamTag) {
        let sigma = (2.0 / (c_in * 9) as f64).sqrt();
        self.put(
            format!("{prefix}.weight"),
            &[c_out, c_in, 3, 3],
            Init::Normal(sigma),
            tag,
        );
        self.put(format!("{prefix}.bias"), &[c_out], Init::Zeros, tag);
    }

    fn linear(&mut self, prefix: &str, c_out: usize, c_in: usize, sigma: f64, tag: ParamTag) {
        self.put(
            format!("{prefix}.weight"),
            &[c_out, c_in],
            Init::Normal(sigma),
            tag,
        );
        self.put(format!("{prefix}.bias"), &[c_out], Init::Zeros, tag);
    }

    fn norm(&mut self, prefix: &str, c: usize, tag: ParamTag) {
        self.put(format!("{prefix}.gamma"), &[c], Init::Ones, tag);
        self.put(format!("{prefix}.beta"), &[c], Init::Zeros, tag);
    }

    fn attn(&mut self, prefix: &str, c: usize, zero_out: bool, tag: ParamTag) {
        let sigma = 1.0 / (c as f64).sqrt();
        for proj in ["q_proj", "k_proj", "v_proj"] {
            self.linear(&format!("{prefix}.{proj}"), c, c, sigma, tag);
        }
        let out = format!("{prefix}.out_proj");
        if zero_out {
            self.put(format!("{out}.weight"), &[c, c], Init::Zeros, tag);
            self.put(format!("{out}.bias"), &[c], Init::Zeros, tag);
        } else {
            self.linear(&out, c, c, sigma, tag);
        }
    }

    pub fn block(&mut self, blk: &BlockSpec) {
        let b = &blk.name;
        let c = blk.c;
        let temb = self.cfg.temb_dim();
        let spatial = ParamTag::Spatial;
        let temporal = ParamTag::Temporal;

        // spatial conv stack: SC_UNITS residual units of two 3x3 convs
        for u in 0..SC_UNITS {
            let cin_u = if u == 0 { blk.stack_in() } else { c };
            let p = format!("{b}.spatial_conv.u{u}");
            self.norm(&format!("{p}.norm1"), cin_u, spatial);
            self.conv2d(&format!("{p}.conv1"), c, cin_u, spatial);
            self.norm(&format!("{p}.norm2"), c, spatial);
            self.conv2d(&format!("{p}.conv2"), c, c, spatial);
            if u == 0 && cin_u != c {
                self.linear(
                    &format!("{p}.skip_proj"),
                    c,
                    cin_u,
                    (1.0 / cin_u as f64).sqrt(),
                    spatial,
                );
            }
        }
        self.linear(
            &format!("{b}.spatial_conv.time_proj"),
            c,
            temb,
            0.02,
            spatial,
        );
        self.attn(&format!("{b}.spatial_attn"), c, false, spatial);

        // temporal conv stack: depthwise tap pair, second conv zero-init
        let tc = format!("{b}.temporal_conv");
        let tap_sigma = (1.0_f64 / 3.0).sqrt();
        self.put(
            format!("{tc}.conv1.weight"),
            &[c, 3],
            Init::Normal(tap_sigma),
            temporal,
        );
        self.put(format!("{tc}.conv1.bias"), &[c], Init::Zeros, temporal);
        self.put(format!("{tc}.conv2.weight"), &[c, 3], Init::Zeros, temporal);
        self.put(format!("{tc}.conv2.bias"), &[c], Init::Zeros, temporal);

        self.attn(&format!("{b}.temporal_attn"), c, true, temporal);

        if self.cfg.mode == super::WiringMode::Parallel && blk.needs_t_adapt() {
            self.linear(
                &format!("{b}.t_adapt"),
                c,
                blk.cin,
                (1.0 / blk.cin as f64).sqrt(),
                temporal,
            );
        }
        if let Some(cat) = blk.bridge_in {
            let k: usize = b.strip_prefix("up.").unwrap().parse().unwrap();
            let sigma = (1.0 / cat as f64).sqrt();
            self.linear(&format!("up.{k}.bridge_h"), c, cat, sigma, spatial);
            if self.cfg.mode == super::WiringMode::Parallel {
                self.linear(&format!("up.{k}.bridge_t"), c, cat, sigma, temporal);
            }
        }
    }

    pub fn globals(&mut self) {
        let cfg = self.cfg;
        let w0 = cfg.base_width;
        let temb = cfg.temb_dim();
        let spatial = ParamTag::Spatial;

        self.linear(
            "pre.in_proj",
            w0,
            cfg.in_channels,
            (1.0 / cfg.in_channels as f64).sqrt(),
            spatial,
        );
        let mlp_sigma = (1.0 / temb as f64).sqrt();
        self.linear("pre.time_mlp.fc1", temb, temb, mlp_sigma, spatial);
        self.linear("pre.time_mlp.fc2", temb, temb, mlp_sigma, spatial);
        self.put(
            "pre.cond_embed.table".into(),
            &[cfg.cond_vocab, temb],
            Init::Normal(0.02),
            spatial,
        );

        if cfg.mode == super::WiringMode::Parallel {
            let k = cfg.fusion_kernel;
            self.put(
                "fuse.conv.weight".into(),
                &[w0, 2 * w0, k, k],
                Init::FuseIdentity { kernel: k },
                ParamTag::Plumbing,
            );
            self.put("fuse.conv.bias".into(), &[w0], Init::Zeros, ParamTag::Plumbing);
        }

        self.norm("post.norm", w0, spatial);
        self.linear("post.out_proj", cfg.in_channels, w0, 0.02, spatial);
    }
}
