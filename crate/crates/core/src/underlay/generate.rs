use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PhysicalTopology, UnderlayError};

const MAX_ATTEMPTS: u32 = 64;

/// Random graph family used by [`generate_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Path graph `0 - 1 - ... - (n-1)`.
    Line,
    /// Routers placed uniformly in the unit square; `u, v` are linked with
    /// probability `alpha * exp(-d / (beta * L))`, `L` the square's diagonal.
    Waxman { alpha: f64, beta: f64 },
    /// Two-level hierarchy: transit domains interconnected into a backbone,
    /// stub domains hanging off transit routers.
    TransitStub { transit_domains: usize, transit_size: usize, stub_size: usize, extra_edge_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyParams {
    pub generator: GeneratorKind,
    /// Link delays are drawn uniformly from `[lo, hi]`.
    #[serde(default = "default_delay_range")]
    pub delay_ms: (f64, f64),
    /// Link bandwidths are drawn uniformly from this set.
    #[serde(default = "default_bandwidths")]
    pub bandwidth_mbps: Vec<f64>,
}

fn default_delay_range() -> (f64, f64) {
    (1.0, 50.0)
}

fn default_bandwidths() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0]
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams::waxman()
    }
}

impl TopologyParams {
    pub fn waxman() -> Self {
        TopologyParams {
            generator: GeneratorKind::Waxman { alpha: 0.25, beta: 0.3 },
            delay_ms: default_delay_range(),
            bandwidth_mbps: default_bandwidths(),
        }
    }

    pub fn transit_stub() -> Self {
        TopologyParams {
            generator: GeneratorKind::TransitStub {
                transit_domains: 2,
                transit_size: 4,
                stub_size: 5,
                extra_edge_prob: 0.2,
            },
            delay_ms: default_delay_range(),
            bandwidth_mbps: default_bandwidths(),
        }
    }

    pub fn line() -> Self {
        TopologyParams {
            generator: GeneratorKind::Line,
            delay_ms: default_delay_range(),
            bandwidth_mbps: default_bandwidths(),
        }
    }

    pub fn validate(&self) -> Result<(), UnderlayError> {
        let bad = |m: &str| Err(UnderlayError::InvalidParams(m.to_string()));
        let (lo, hi) = self.delay_ms;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad("delay range must satisfy 0 < lo <= hi");
        }
        if self.bandwidth_mbps.is_empty() || self.bandwidth_mbps.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("bandwidth set must be non-empty and positive");
        }
        match self.generator {
            GeneratorKind::Line => {}
            GeneratorKind::Waxman { alpha, beta } => {
                if !(alpha > 0.0 && alpha <= 1.0 && beta > 0.0) {
                    return bad("waxman needs 0 < alpha <= 1 and beta > 0");
                }
            }
            GeneratorKind::TransitStub { transit_domains, transit_size, stub_size, extra_edge_prob } => {
                if transit_domains == 0 || transit_size == 0 || stub_size == 0 {
                    return bad("transit-stub sizes must be positive");
                }
                if !(0.0..=1.0).contains(&extra_edge_prob) {
                    return bad("extra_edge_prob must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

/// Generates a connected topology. Identical `(router_count, params, seed)`
/// always yields the identical topology.
pub fn generate_topology(
    router_count: usize,
    params: &TopologyParams,
    seed: u64,
) -> Result<PhysicalTopology, UnderlayError> {
    if router_count < 2 {
        return Err(UnderlayError::TooFewRouters(router_count));
    }
    params.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let links = match &params.generator {
            GeneratorKind::Line => line_links(router_count, params, &mut rng),
            GeneratorKind::Waxman { alpha, beta } => waxman_links(router_count, *alpha, *beta, params, &mut rng),
            GeneratorKind::TransitStub { transit_domains, transit_size, stub_size, extra_edge_prob } => {
                transit_stub_links(
                    router_count,
                    *transit_domains,
                    *transit_size,
                    *stub_size,
                    *extra_edge_prob,
                    params,
                    &mut rng,
                )
            }
        };
        let topo = PhysicalTopology::from_links(router_count, &links)?;
        if topo.is_connected() {
            return Ok(topo);
        }
        log::debug!("topology attempt {attempt} for seed {seed} disconnected, retrying");
    }
    Err(UnderlayError::Disconnected { seed, attempts: MAX_ATTEMPTS })
}

type RawLink = (u32, u32, f64, f64);

fn draw_link(a: usize, b: usize, delay: (f64, f64), params: &TopologyParams, rng: &mut ChaCha8Rng) -> RawLink {
    let d = if delay.0 == delay.1 { delay.0 } else { rng.gen_range(delay.0..=delay.1) };
    let bw = *params.bandwidth_mbps.choose(rng).expect("validated non-empty");
    (a as u32, b as u32, d, bw)
}

fn line_links(n: usize, params: &TopologyParams, rng: &mut ChaCha8Rng) -> Vec<RawLink> {
    (1..n).map(|i| draw_link(i - 1, i, params.delay_ms, params, rng)).collect()
}

fn waxman_links(n: usize, alpha: f64, beta: f64, params: &TopologyParams, rng: &mut ChaCha8Rng) -> Vec<RawLink> {
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let diag = std::f64::consts::SQRT_2;
    let mut links = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let d = ((pos[u].0 - pos[v].0).powi(2) + (pos[u].1 - pos[v].1).powi(2)).sqrt();
            let p = alpha * (-d / (beta * diag)).exp();
            if rng.gen::<f64>() < p {
                links.push(draw_link(u, v, params.delay_ms, params, rng));
            }
        }
    }
    links
}

/// Connects `members` with a random spanning tree plus extra edges.
fn random_domain(
    members: &[usize],
    extra_p: f64,
    delay: (f64, f64),
    params: &TopologyParams,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<RawLink>,
) {
    let mut present = std::collections::BTreeSet::new();
    for i in 1..members.len() {
        let j = rng.gen_range(0..i);
        let (a, b) = (members[j].min(members[i]), members[j].max(members[i]));
        present.insert((a, b));
        out.push(draw_link(a, b, delay, params, rng));
    }
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            let (a, b) = (members[i].min(members[j]), members[i].max(members[j]));
            if !present.contains(&(a, b)) && rng.gen::<f64>() < extra_p {
                present.insert((a, b));
                out.push(draw_link(a, b, delay, params, rng));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn transit_stub_links(
    n: usize,
    domains: usize,
    domain_size: usize,
    stub_size: usize,
    extra_p: f64,
    params: &TopologyParams,
    rng: &mut ChaCha8Rng,
) -> Vec<RawLink> {
    let (lo, hi) = params.delay_ms;
    let mid = 0.5 * (lo + hi);
    // backbone links are long-haul, stub links short
    let transit_delay = (mid, hi);
    let stub_delay = (lo, mid);

    let n_transit = (domains * domain_size).min(n);
    let mut transit: Vec<Vec<usize>> = vec![Vec::new(); domains];
    for r in 0..n_transit {
        transit[r / domain_size].push(r);
    }
    transit.retain(|d| !d.is_empty());

    let mut links = Vec::new();
    for dom in &transit {
        random_domain(dom, extra_p, transit_delay, params, rng, &mut links);
    }
    let mut inter = std::collections::BTreeSet::new();
    for i in 1..transit.len() {
        let a = *transit[i - 1].choose(rng).expect("non-empty domain");
        let b = *transit[i].choose(rng).expect("non-empty domain");
        inter.insert((a.min(b), a.max(b)));
        links.push(draw_link(a.min(b), a.max(b), transit_delay, params, rng));
    }
    for i in 0..transit.len() {
        for j in (i + 2)..transit.len() {
            if rng.gen::<f64>() < extra_p {
                let a = *transit[i].choose(rng).expect("non-empty domain");
                let b = *transit[j].choose(rng).expect("non-empty domain");
                if inter.insert((a.min(b), a.max(b))) {
                    links.push(draw_link(a.min(b), a.max(b), transit_delay, params, rng));
                }
            }
        }
    }

    let mut next = n_transit;
    while next < n {
        let end = (next + stub_size).min(n);
        let stub: Vec<usize> = (next..end).collect();
        random_domain(&stub, extra_p, stub_delay, params, rng, &mut links);
        let gateway = rng.gen_range(0..n_transit);
        links.push(draw_link(gateway, stub[0], stub_delay, params, rng));
        next = end;
    }
    links
}
