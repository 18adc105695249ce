//! Network data model: agents, directed communication edges, and the
//! stubborn / non-stubborn partition.
//!
//! An edge `src -> dst` with probability `p` means `dst` follows `src`: at
//! every tick `src` communicates with `dst` with probability `p`. For every
//! non-stubborn agent the probabilities on its incoming edges must sum to at
//! most one.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking in-neighbourhood probability sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Dense agent index, `0..n_agents`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InEdge {
    pub source: AgentId,
    pub prob: f64,
}

/// Immutable social network with stubborn agents.
#[derive(Clone, Debug)]
pub struct Network {
    labels: Vec<String>,
    index: HashMap<String, AgentId>,
    in_edges: Vec<Vec<InEdge>>,
    out_degree: Vec<usize>,
    stubborn: Vec<bool>,
    opinions: Vec<Option<f64>>,
    rates: Vec<Option<f64>>,
    rate_scale: Option<f64>,
}

impl Network {
    pub fn n_agents(&self) -> usize {
        self.labels.len()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        (0..self.n_agents()).map(AgentId)
    }

    /// Original identifier of an agent as it appeared in the input.
    pub fn label(&self, id: AgentId) -> &str {
        &self.labels[id.0]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id_of(&self, label: &str) -> Option<AgentId> {
        self.index.get(label).copied()
    }

    pub fn in_edges(&self, id: AgentId) -> &[InEdge] {
        &self.in_edges[id.0]
    }

    /// Number of followers, i.e. outgoing edges.
    pub fn out_degree(&self, id: AgentId) -> usize {
        self.out_degree[id.0]
    }

    pub fn n_edges(&self) -> usize {
        self.in_edges.iter().map(Vec::len).sum()
    }

    pub fn is_stubborn(&self, id: AgentId) -> bool {
        self.stubborn[id.0]
    }

    /// Fixed opinion of a stubborn agent, `None` for non-stubborn agents.
    pub fn stubborn_opinion(&self, id: AgentId) -> Option<f64> {
        if self.stubborn[id.0] {
            self.opinions[id.0]
        } else {
            None
        }
    }

    /// Opinion column from the input. For non-stubborn agents this is only an
    /// initial condition for simulation.
    pub fn opinion(&self, id: AgentId) -> Option<f64> {
        self.opinions[id.0]
    }

    pub fn posting_rate(&self, id: AgentId) -> Option<f64> {
        self.rates[id.0]
    }

    /// Normalisation constant `Z` if probabilities were derived from rates.
    pub fn rate_scale(&self) -> Option<f64> {
        self.rate_scale
    }

    pub fn stubborn_agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agents().filter(|&a| self.stubborn[a.0])
    }

    pub fn nonstubborn_agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agents().filter(|&a| !self.stubborn[a.0])
    }

    pub fn n_stubborn(&self) -> usize {
        self.stubborn.iter().filter(|&&s| s).count()
    }

    pub fn in_probability_sum(&self, id: AgentId) -> f64 {
        self.in_edges[id.0].iter().map(|e| e.prob).sum()
    }

    /// Out-adjacency lists (followers of each agent), in ascending order.
    pub fn followers(&self) -> Vec<Vec<AgentId>> {
        let mut out = vec![Vec::new(); self.n_agents()];
        for dst in self.agents() {
            for e in &self.in_edges[dst.0] {
                out[e.source.0].push(dst);
            }
        }
        out
    }

    /// Mean posting rate over non-stubborn agents that report a rate.
    pub fn mean_nonstubborn_rate(&self) -> Option<f64> {
        let rates: Vec<f64> = self.nonstubborn_agents().filter_map(|a| self.rates[a.0]).collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    /// Returns a copy with the stubborn set replaced by `partition`.
    pub fn with_partition(&self, partition: &StubbornPartition) -> Result<Network> {
        let mut net = self.clone();
        net.stubborn.iter_mut().for_each(|s| *s = false);
        for &(id, opinion) in &partition.stubborn {
            if id.0 >= net.n_agents() {
                return Err(Error::domain(format!("agent {id} out of range")));
            }
            net.stubborn[id.0] = true;
            net.opinions[id.0] = Some(opinion);
        }
        net.check_opinions()?;
        Ok(net)
    }

    fn check_opinions(&self) -> Result<()> {
        for a in self.agents() {
            match (self.stubborn[a.0], self.opinions[a.0]) {
                (true, None) => {
                    return Err(Error::domain(format!(
                        "stubborn agent '{}' has no opinion",
                        self.labels[a.0]
                    )))
                }
                (_, Some(o)) if !(0.0..=1.0).contains(&o) => {
                    return Err(Error::domain(format!(
                        "agent '{}' has opinion {o} outside [0, 1]",
                        self.labels[a.0]
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Writes the edge list in the `src,dst,prob` format.
    pub fn write_edges<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let res = (|| -> csv::Result<()> {
            wr.write_record(["src", "dst", "prob"])?;
            for dst in self.agents() {
                for e in &self.in_edges[dst.0] {
                    wr.write_record([
                        self.label(e.source),
                        self.label(dst),
                        &e.prob.to_string(),
                    ])?;
                }
            }
            wr.flush()?;
            Ok(())
        })();
        res.map_err(csv_write_error)
    }

    /// Writes the agent table in the `id,opinion,rate,stubborn` format.
    pub fn write_agents<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let res = (|| -> csv::Result<()> {
            wr.write_record(["id", "opinion", "rate", "stubborn"])?;
            for a in self.agents() {
                let opinion = self.opinions[a.0].map(|o| o.to_string()).unwrap_or_default();
                let rate = self.rates[a.0].map(|r| r.to_string()).unwrap_or_default();
                let flag = if self.stubborn[a.0] { "1" } else { "0" };
                wr.write_record([self.label(a), &opinion, &rate, flag])?;
            }
            wr.flush()?;
            Ok(())
        })();
        res.map_err(csv_write_error)
    }
}

fn csv_write_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: "<output>".into(), source },
        other => Error::Numerical(format!("csv writer: {other:?}")),
    }
}

/// Incremental constructor for [`Network`]. Agents are numbered in the order
/// they are first mentioned.
#[derive(Default, Debug)]
pub struct NetworkBuilder {
    labels: Vec<String>,
    index: HashMap<String, AgentId>,
    in_edges: Vec<Vec<InEdge>>,
    stubborn: Vec<bool>,
    opinions: Vec<Option<f64>>,
    rates: Vec<Option<f64>>,
    edge_set: HashSet<(usize, usize)>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `label`, registering a non-stubborn agent if it is new.
    pub fn agent(&mut self, label: &str) -> AgentId {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = AgentId(self.labels.len());
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        self.in_edges.push(Vec::new());
        self.stubborn.push(false);
        self.opinions.push(None);
        self.rates.push(None);
        id
    }

    pub fn set_opinion(&mut self, id: AgentId, opinion: Option<f64>) -> &mut Self {
        self.opinions[id.0] = opinion;
        self
    }

    pub fn set_rate(&mut self, id: AgentId, rate: Option<f64>) -> &mut Self {
        self.rates[id.0] = rate;
        self
    }

    pub fn set_stubborn(&mut self, id: AgentId, stubborn: bool) -> &mut Self {
        self.stubborn[id.0] = stubborn;
        self
    }

    /// Convenience: registers a stubborn agent with a fixed opinion.
    pub fn stubborn(&mut self, label: &str, opinion: f64) -> AgentId {
        let id = self.agent(label);
        self.set_stubborn(id, true).set_opinion(id, Some(opinion));
        id
    }

    pub fn add_edge(&mut self, src: AgentId, dst: AgentId, prob: f64) -> Result<()> {
        self.insert_edge(src, dst, prob, None)
    }

    /// Convenience: `add_edge` by label, creating agents as needed.
    pub fn edge(&mut self, src: &str, dst: &str, prob: f64) -> Result<()> {
        let s = self.agent(src);
        let d = self.agent(dst);
        self.add_edge(s, d, prob)
    }

    fn insert_edge(&mut self, src: AgentId, dst: AgentId, prob: f64, line: Option<u64>) -> Result<()> {
        if src == dst {
            return Err(Error::SelfLoop { line, agent: self.labels[src.0].clone() });
        }
        if !(prob > 0.0 && prob <= 1.0) {
            let at = line.map(|l| format!("line {l}: ")).unwrap_or_default();
            return Err(Error::Domain(format!(
                "{at}edge {} -> {} has probability {prob} outside (0, 1]",
                self.labels[src.0], self.labels[dst.0]
            )));
        }
        if !self.edge_set.insert((src.0, dst.0)) {
            return Err(Error::DuplicateEdge {
                line,
                src: self.labels[src.0].clone(),
                dst: self.labels[dst.0].clone(),
            });
        }
        self.in_edges[dst.0].push(InEdge { source: src, prob });
        Ok(())
    }

    pub fn build(self) -> Result<Network> {
        let n = self.labels.len();
        let mut out_degree = vec![0; n];
        for edges in &self.in_edges {
            for e in edges {
                out_degree[e.source.0] += 1;
            }
        }
        let net = Network {
            labels: self.labels,
            index: self.index,
            in_edges: self.in_edges,
            out_degree,
            stubborn: self.stubborn,
            opinions: self.opinions,
            rates: self.rates,
            rate_scale: None,
        };
        net.check_opinions()?;
        for a in net.agents() {
            if let Some(r) = net.rates[a.0] {
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(Error::domain(format!(
                        "agent '{}' has invalid posting rate {r}",
                        net.labels[a.0]
                    )));
                }
            }
        }
        Ok(net)
    }
}

/// Where edge probabilities come from when loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbabilitySource {
    /// Use the `prob` column as given.
    #[default]
    Given,
    /// Ignore the `prob` column and derive probabilities from posting rates
    /// with [`normalize_rates`].
    FromRates,
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn csv_read_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_err(line, e.to_string())
}

fn header_positions(
    rdr: &mut csv::Reader<impl Read>,
    required: &[&str],
    file: &str,
) -> Result<Vec<usize>> {
    let headers = rdr.headers().map_err(csv_read_error)?.clone();
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim_start_matches('\u{feff}') == *name)
                .ok_or_else(|| parse_err(1, format!("{file} header is missing column '{name}'")))
        })
        .collect()
}

fn parse_opt_f64(raw: &str, line: u64, column: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| parse_err(line, format!("cannot parse {column} '{raw}' as a number")))
}

/// Reads a network from an edge table (`src,dst,prob`) and an agent table
/// (`id,opinion,rate,stubborn`). Agent ids are remapped densely in the order
/// they are first seen, agent table first. Agents that only appear in the
/// edge table are non-stubborn without opinion or rate.
pub fn load_network<E: Read, A: Read>(edges: E, agents: A, source: ProbabilitySource) -> Result<Network> {
    let mut b = NetworkBuilder::new();

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(agents);
    let cols = header_positions(&mut rdr, &["id", "opinion", "rate", "stubborn"], "agent file")?;
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_read_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(cols[i]).unwrap_or("");
        let label = field(0);
        if label.is_empty() {
            return Err(parse_err(line, "empty agent id"));
        }
        if !seen.insert(label.to_owned()) {
            return Err(parse_err(line, format!("agent '{label}' listed twice")));
        }
        let opinion = parse_opt_f64(field(1), line, "opinion")?;
        let rate = parse_opt_f64(field(2), line, "rate")?;
        let stubborn = match field(3) {
            "1" => true,
            "0" | "" => false,
            other => return Err(parse_err(line, format!("stubborn flag must be 0 or 1, got '{other}'"))),
        };
        if let Some(o) = opinion {
            if !(0.0..=1.0).contains(&o) {
                return Err(Error::Domain(format!("line {line}: opinion {o} outside [0, 1]")));
            }
        }
        if stubborn && opinion.is_none() {
            return Err(Error::Domain(format!("line {line}: stubborn agent '{label}' has no opinion")));
        }
        let id = b.agent(label);
        b.set_opinion(id, opinion).set_rate(id, rate).set_stubborn(id, stubborn);
    }

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(edges);
    let cols = header_positions(&mut rdr, &["src", "dst", "prob"], "edge file")?;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_read_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(cols[i]).unwrap_or("");
        let (src, dst) = (field(0), field(1));
        if src.is_empty() || dst.is_empty() {
            return Err(parse_err(line, "empty agent id in edge"));
        }
        let prob = match source {
            // Placeholder; replaced by normalisation below.
            ProbabilitySource::FromRates => 1.0,
            ProbabilitySource::Given => parse_opt_f64(field(2), line, "prob")?
                .ok_or_else(|| parse_err(line, "missing edge probability"))?,
        };
        let s = b.agent(src);
        let d = b.agent(dst);
        b.insert_edge(s, d, prob, Some(line))?;
    }

    let net = b.build()?;
    match source {
        ProbabilitySource::Given => Ok(net),
        ProbabilitySource::FromRates => normalize_rates(&net),
    }
}

/// [`load_network`] from file paths.
pub fn load_network_files(edges: &Path, agents: &Path, source: ProbabilitySource) -> Result<Network> {
    let open = |p: &Path| File::open(p).map_err(|source| Error::Io { path: p.to_path_buf(), source });
    let e = open(edges)?;
    let a = open(agents)?;
    load_network(e, a, source)
}

/// Largest in-neighbourhood rate sum over non-stubborn agents. Agents without
/// a rate count as zero.
pub fn rate_normalizer(network: &Network) -> f64 {
    network
        .nonstubborn_agents()
        .map(|i| {
            network
                .in_edges(i)
                .iter()
                .map(|e| network.posting_rate(e.source).unwrap_or(0.0))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Replaces edge probabilities by `rate_src / Z`, where `Z` is the largest
/// total posting rate seen by any non-stubborn agent. Relative rates are
/// preserved and every non-stubborn in-neighbourhood sums to at most one.
/// Edges from zero-rate agents are dropped. Edges into stubborn agents do not
/// enter the model; their probability is capped at one.
pub fn normalize_rates(network: &Network) -> Result<Network> {
    for a in network.agents() {
        if network.out_degree(a) > 0 && network.posting_rate(a).is_none() {
            return Err(Error::Degenerate(format!(
                "agent '{}' has followers but no posting rate",
                network.label(a)
            )));
        }
    }
    if network.agents().all(|a| network.posting_rate(a).unwrap_or(0.0) == 0.0) {
        return Err(Error::Degenerate("all posting rates are zero".into()));
    }
    let z = rate_normalizer(network);
    if z <= 0.0 {
        return Err(Error::Degenerate(
            "no non-stubborn agent follows an agent with a positive rate".into(),
        ));
    }
    let mut net = network.clone();
    for (dst, edges) in net.in_edges.iter_mut().enumerate() {
        let stubborn_dst = network.stubborn[dst];
        edges.retain(|e| network.rates[e.source.0].unwrap_or(0.0) > 0.0);
        for e in edges.iter_mut() {
            let p = network.rates[e.source.0].unwrap_or(0.0) / z;
            e.prob = if stubborn_dst { p.min(1.0) } else { p };
        }
    }
    net.out_degree.iter_mut().for_each(|d| *d = 0);
    for edges in &net.in_edges {
        for e in edges {
            net.out_degree[e.source.0] += 1;
        }
    }
    net.rate_scale = Some(z);
    Ok(net)
}

/// Findings of [`validate`]. Empty lists mean the equilibrium is unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub row_sum_violations: Vec<(AgentId, f64)>,
    pub unreachable_nonstubborn: Vec<AgentId>,
    /// Weakly connected components that contain no stubborn agent.
    pub isolated_components: usize,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.row_sum_violations.is_empty() && self.unreachable_nonstubborn.is_empty()
    }
}

pub fn validate(network: &Network) -> ValidationReport {
    let n = network.n_agents();
    let row_sum_violations = network
        .nonstubborn_agents()
        .filter_map(|i| {
            let s = network.in_probability_sum(i);
            (s > 1.0 + ROW_SUM_TOLERANCE).then_some((i, s))
        })
        .collect();

    let followers = network.followers();
    let mut reached = vec![false; n];
    let mut queue: VecDeque<AgentId> = network.stubborn_agents().collect();
    for a in &queue {
        reached[a.0] = true;
    }
    while let Some(u) = queue.pop_front() {
        for &v in &followers[u.0] {
            if !reached[v.0] {
                reached[v.0] = true;
                queue.push_back(v);
            }
        }
    }
    let unreachable_nonstubborn = network.nonstubborn_agents().filter(|a| !reached[a.0]).collect();

    // Weak components via union-find.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for dst in network.agents() {
        for e in network.in_edges(dst) {
            let (a, b) = (find(&mut parent, e.source.0), find(&mut parent, dst.0));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut has_stubborn: HashMap<usize, bool> = HashMap::new();
    for a in network.agents() {
        let root = find(&mut parent, a.0);
        *has_stubborn.entry(root).or_insert(false) |= network.is_stubborn(a);
    }
    let isolated_components = has_stubborn.values().filter(|&&s| !s).count();

    ValidationReport { row_sum_violations, unreachable_nonstubborn, isolated_components }
}

/// Closed opinion interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StubbornPartition {
    /// Stubborn agents with their fixed opinion, ascending by id.
    pub stubborn: Vec<(AgentId, f64)>,
}

impl StubbornPartition {
    pub fn stubborn_set(&self) -> Vec<AgentId> {
        self.stubborn.iter().map(|&(a, _)| a).collect()
    }
}

/// Marks an agent stubborn iff its measured opinion lies in one of the two
/// closed intervals. Agents without a measured opinion stay non-stubborn.
pub fn classify_stubborn(opinions: &[Option<f64>], low: Interval, high: Interval) -> Result<StubbornPartition> {
    for iv in [low, high] {
        if !(0.0 <= iv.lo && iv.lo <= iv.hi && iv.hi <= 1.0) {
            return Err(Error::config(format!(
                "interval [{}, {}] is not a subinterval of [0, 1]",
                iv.lo, iv.hi
            )));
        }
    }
    if low.lo <= high.hi && high.lo <= low.hi {
        return Err(Error::config(format!(
            "stubborn intervals [{}, {}] and [{}, {}] overlap",
            low.lo, low.hi, high.lo, high.hi
        )));
    }
    let stubborn = opinions
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.filter(|&x| low.contains(x) || high.contains(x)).map(|x| (AgentId(i), x)))
        .collect();
    Ok(StubbornPartition { stubborn })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1_EDGES: &str = "src,dst,prob\nk,j,0.01\nj,i,0.25\ni,j,0.49\n";
    const FIG1_AGENTS: &str = "id,opinion,rate,stubborn\nk,1,,1\ni,,,0\nj,,,0\n";

    fn three_agents() -> Network {
        load_network(FIG1_EDGES.as_bytes(), FIG1_AGENTS.as_bytes(), ProbabilitySource::Given).unwrap()
    }

    #[test]
    fn loads_three_agent_network() {
        let net = three_agents();
        assert_eq!(net.n_agents(), 3);
        assert_eq!(net.n_stubborn(), 1);
        assert_eq!(net.nonstubborn_agents().count(), 2);
        let j = net.id_of("j").unwrap();
        assert_eq!(net.in_edges(j).len(), 2);
        assert!(validate(&net).is_valid());
    }

    #[test]
    fn crlf_and_column_order() {
        let edges = "dst,src,prob\r\nb,a,0.5\r\n";
        let agents = "stubborn,id,rate,opinion\r\n1,a,,0.3\r\n";
        let net = load_network(edges.as_bytes(), agents.as_bytes(), ProbabilitySource::Given).unwrap();
        let b = net.id_of("b").unwrap();
        assert_eq!(net.in_edges(b)[0].prob, 0.5);
        assert_eq!(net.stubborn_opinion(net.id_of("a").unwrap()), Some(0.3));
    }

    #[test]
    fn empty_edge_list() {
        let net = load_network("src,dst,prob\n".as_bytes(), "id,opinion,rate,stubborn\ns,0.2,,1\n".as_bytes(), ProbabilitySource::Given)
            .unwrap();
        assert_eq!(net.n_edges(), 0);
        let r = validate(&net);
        assert!(r.is_valid());
        assert_eq!(r.isolated_components, 0);
    }

    #[test]
    fn rejects_bad_probability() {
        let err = load_network("src,dst,prob\na,b,1.5\n".as_bytes(), FIG1_AGENTS.as_bytes(), ProbabilitySource::Given)
            .unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("line 2")), "{err}");
    }

    #[test]
    fn rejects_malformed_row_with_line() {
        let err = load_network("src,dst,prob\na,b,0.1\na,c,abc\n".as_bytes(), FIG1_AGENTS.as_bytes(), ProbabilitySource::Given)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_self_loops() {
        let err = load_network("src,dst,prob\na,b,0.1\na,b,0.2\n".as_bytes(), FIG1_AGENTS.as_bytes(), ProbabilitySource::Given)
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateEdge { line: Some(3), .. }), "{err}");
        let err = load_network("src,dst,prob\na,a,0.1\n".as_bytes(), FIG1_AGENTS.as_bytes(), ProbabilitySource::Given)
            .unwrap_err();
        assert!(matches!(err, Error::SelfLoop { .. }));
    }

    #[test]
    fn normalizes_symmetric_rates() {
        let mut b = NetworkBuilder::new();
        for (label, rate) in [("a", 2.0), ("bb", 2.0)] {
            let id = b.stubborn(label, 0.0);
            b.set_rate(id, Some(rate));
        }
        b.edge("a", "v", 1.0).unwrap();
        b.edge("bb", "v", 1.0).unwrap();
        let net = normalize_rates(&b.build().unwrap()).unwrap();
        let v = net.id_of("v").unwrap();
        assert_eq!(net.rate_scale(), Some(4.0));
        assert!(net.in_edges(v).iter().all(|e| e.prob == 0.5));
    }

    #[test]
    fn normalizes_asymmetric_rates() {
        let mut b = NetworkBuilder::new();
        for (label, rate) in [("a", 1.0), ("bb", 3.0)] {
            let id = b.stubborn(label, 0.0);
            b.set_rate(id, Some(rate));
        }
        b.edge("a", "v", 1.0).unwrap();
        b.edge("bb", "v", 1.0).unwrap();
        let net = normalize_rates(&b.build().unwrap()).unwrap();
        let v = net.id_of("v").unwrap();
        let probs: Vec<f64> = net.in_edges(v).iter().map(|e| e.prob).collect();
        assert_eq!(probs, vec![0.25, 0.75]);
    }

    #[test]
    fn normalization_drops_zero_rate_edges_and_rejects_all_zero() {
        let mut b = NetworkBuilder::new();
        let s = b.stubborn("s", 1.0);
        b.set_rate(s, Some(2.0));
        let q = b.agent("q");
        b.set_rate(q, Some(0.0));
        b.edge("s", "v", 1.0).unwrap();
        b.edge("q", "v", 1.0).unwrap();
        let net = normalize_rates(&b.build().unwrap()).unwrap();
        assert_eq!(net.in_edges(net.id_of("v").unwrap()).len(), 1);

        let mut b = NetworkBuilder::new();
        let s = b.stubborn("s", 1.0);
        b.set_rate(s, Some(0.0));
        b.edge("s", "v", 1.0).unwrap();
        assert!(matches!(normalize_rates(&b.build().unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn given_probabilities_pass_through_unchanged() {
        let net = three_agents();
        let j = net.id_of("j").unwrap();
        let probs: Vec<f64> = net.in_edges(j).iter().map(|e| e.prob).collect();
        assert_eq!(probs, vec![0.01, 0.49]);
    }

    #[test]
    fn validation_flags_unreachable_cycle() {
        let mut b = NetworkBuilder::new();
        b.edge("x", "y", 0.5).unwrap();
        b.edge("y", "x", 0.5).unwrap();
        let r = validate(&b.build().unwrap());
        assert_eq!(r.unreachable_nonstubborn, vec![AgentId(0), AgentId(1)]);
        assert_eq!(r.isolated_components, 1);
        assert!(!r.is_valid());
    }

    #[test]
    fn validation_flags_row_sum() {
        let mut b = NetworkBuilder::new();
        b.stubborn("s", 1.0);
        b.edge("s", "v", 0.7).unwrap();
        b.edge("w", "v", 0.5).unwrap();
        b.edge("s", "w", 0.5).unwrap();
        let r = validate(&b.build().unwrap());
        assert_eq!(r.row_sum_violations.len(), 1);
        let (id, sum) = r.row_sum_violations[0];
        assert_eq!(id, AgentId(1));
        assert!((sum - 1.2).abs() < 1e-12);
    }

    #[test]
    fn classify_intervals() {
        let p = classify_stubborn(
            &[Some(0.05), Some(0.5), Some(0.95)],
            Interval::new(0.0, 0.1),
            Interval::new(0.9, 1.0),
        )
        .unwrap();
        assert_eq!(p.stubborn_set(), vec![AgentId(0), AgentId(2)]);

        let p = classify_stubborn(&[Some(0.5); 3], Interval::new(0.0, 0.0), Interval::new(1.0, 1.0)).unwrap();
        assert!(p.stubborn.is_empty());

        let p = classify_stubborn(&[Some(0.1), Some(0.9)], Interval::new(0.0, 0.1), Interval::new(0.9, 1.0)).unwrap();
        assert_eq!(p.stubborn, vec![(AgentId(0), 0.1), (AgentId(1), 0.9)]);

        let err = classify_stubborn(&[], Interval::new(0.0, 0.5), Interval::new(0.4, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn serialization_round_trip() {
        let net = three_agents();
        let mut e = Vec::new();
        let mut a = Vec::new();
        net.write_edges(&mut e).unwrap();
        net.write_agents(&mut a).unwrap();
        let back = load_network(e.as_slice(), a.as_slice(), ProbabilitySource::Given).unwrap();
        assert_eq!(back.labels(), net.labels());
        for x in net.agents() {
            assert_eq!(back.in_edges(x), net.in_edges(x));
            assert_eq!(back.stubborn_opinion(x), net.stubborn_opinion(x));
        }
    }
}
