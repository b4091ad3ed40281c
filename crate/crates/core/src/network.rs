//! Station graph and hop-count shortest-path queries.
//!
//! Stations are nodes, consecutive stations on a line are joined by an
//! undirected edge and a station shared by several lines is a single node.
//! Node indices follow the lexicographic order of station ids and adjacency
//! lists are kept sorted, so breadth-first search expands the
//! lexicographically smallest neighbour first and every query is
//! deterministic.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    lines_of: Vec<BTreeSet<String>>,
    lines: Vec<(String, Vec<String>)>,
}

impl StationGraph {
    /// Builds the graph from ordered station lists, one per line.
    pub fn from_lines(lines: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut ids: BTreeSet<String> = BTreeSet::new();
        for (_, stations) in &lines {
            ids.extend(stations.iter().cloned());
        }
        let ids: Vec<String> = ids.into_iter().collect();
        let index: BTreeMap<String, usize> = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ids.len()];
        let mut lines_of: Vec<BTreeSet<String>> = vec![BTreeSet::new(); ids.len()];
        for (line, stations) in &lines {
            for s in stations {
                lines_of[index[s]].insert(line.clone());
            }
            for pair in stations.windows(2) {
                let (a, b) = (index[&pair[0]], index[&pair[1]]);
                if a == b {
                    return Err(Error::domain(alloc::format!("line {line}: station {} repeated consecutively", pair[0])));
                }
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        // BTreeSet<usize> iterates by index, which is lexicographic by id.
        let adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { ids, index, adjacency, lines_of, lines })
    }

    pub fn n_stations(&self) -> usize {
        self.ids.len()
    }

    pub fn stations(&self) -> &[String] {
        &self.ids
    }

    pub fn lines(&self) -> &[(String, Vec<String>)] {
        &self.lines
    }

    pub fn line_stations(&self, line_id: &str) -> Option<&[String]> {
        self.lines.iter().find(|(l, _)| l == line_id).map(|(_, s)| s.as_slice())
    }

    pub fn lines_of(&self, station: &str) -> Result<&BTreeSet<String>> {
        Ok(&self.lines_of[self.lookup(station)?])
    }

    pub fn neighbors(&self, station: &str) -> Result<Vec<&str>> {
        let i = self.lookup(station)?;
        Ok(self.adjacency[i].iter().map(|&j| self.ids[j].as_str()).collect())
    }

    pub fn contains(&self, station: &str) -> bool {
        self.index.contains_key(station)
    }

    fn lookup(&self, station: &str) -> Result<usize> {
        self.index.get(station).copied().ok_or_else(|| Error::UnknownStation(station.to_string()))
    }

    /// BFS from `src`; returns (hop distance, parent) per node.
    fn bfs(&self, src: usize) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let n = self.ids.len();
        let mut dist = vec![None; n];
        let mut parent = vec![None; n];
        let mut queue = VecDeque::new();
        dist[src] = Some(0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        (dist, parent)
    }

    /// Minimum hop count from `from` to any station of `to_set`; `None` when
    /// no station of the set is reachable.
    pub fn shortest_hops<S: AsRef<str>>(&self, from: &str, to_set: &[S]) -> Result<Option<usize>> {
        if to_set.is_empty() {
            return Err(Error::domain("target station set is empty"));
        }
        let src = self.lookup(from)?;
        let targets = to_set.iter().map(|s| self.lookup(s.as_ref())).collect::<Result<Vec<_>>>()?;
        let (dist, _) = self.bfs(src);
        Ok(targets.iter().filter_map(|&t| dist[t]).min())
    }

    /// One minimum-hop path `o ..= d`, or `None` if `d` is unreachable.
    pub fn shortest_path(&self, o: &str, d: &str) -> Result<Option<Vec<String>>> {
        let src = self.lookup(o)?;
        let dst = self.lookup(d)?;
        if src == dst {
            return Err(Error::domain("shortest_path requires distinct stations"));
        }
        let (dist, parent) = self.bfs(src);
        if dist[dst].is_none() {
            return Ok(None);
        }
        let mut path = vec![dst];
        let mut cur = dst;
        while let Some(p) = parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(Some(path.into_iter().map(|i| self.ids[i].clone()).collect()))
    }

    /// Share of the nodes on the `o`–`d` shortest path that are incident
    /// stations.
    pub fn overlap_proportion<S: AsRef<str>>(&self, o: &str, d: &str, incident_stations: &[S]) -> Result<Option<f64>> {
        let Some(path) = self.shortest_path(o, d)? else {
            return Ok(None);
        };
        let set: BTreeSet<&str> = incident_stations.iter().map(|s| s.as_ref()).collect();
        let hits = path.iter().filter(|s| set.contains(s.as_str())).count();
        Ok(Some(hits as f64 / path.len() as f64))
    }

    /// Largest finite hop distance between any two stations.
    pub fn diameter(&self) -> usize {
        (0..self.ids.len())
            .map(|s| self.bfs(s).0.into_iter().flatten().max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        self.ids.is_empty() || self.bfs(0).0.iter().all(Option::is_some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, stations: &[&str]) -> (String, Vec<String>) {
        (id.to_string(), stations.iter().map(|s| s.to_string()).collect())
    }

    fn path_graph() -> StationGraph {
        StationGraph::from_lines(vec![line("L1", &["A", "B", "C", "D", "E"])]).unwrap()
    }

    /// Exhaustive BFS oracle written independently of the graph type.
    fn oracle_hops(edges: &[(usize, usize)], n: usize, from: usize, to: &[usize]) -> Option<usize> {
        let mut dist = vec![usize::MAX; n];
        dist[from] = 0;
        let mut changed = true;
        while changed {
            changed = false;
            for &(a, b) in edges {
                for (x, y) in [(a, b), (b, a)] {
                    if dist[x] != usize::MAX && dist[x] + 1 < dist[y] {
                        dist[y] = dist[x] + 1;
                        changed = true;
                    }
                }
            }
        }
        to.iter().map(|&t| dist[t]).filter(|&d| d != usize::MAX).min()
    }

    #[test]
    fn hops_on_path() {
        let g = path_graph();
        assert_eq!(g.shortest_hops("A", &["D", "E"]).unwrap(), Some(3));
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4)];
        assert_eq!(oracle_hops(&edges, 5, 0, &[3, 4]), Some(3));
        assert_eq!(g.shortest_hops("C", &["B", "C"]).unwrap(), Some(0));
    }

    #[test]
    fn disconnected_components_are_unreachable() {
        let g = StationGraph::from_lines(vec![line("L1", &["A", "B"]), line("L2", &["X", "Y"])]).unwrap();
        assert_eq!(g.shortest_hops("A", &["Y"]).unwrap(), None);
        assert_eq!(g.shortest_path("A", "Y").unwrap(), None);
        assert_eq!(g.overlap_proportion("A", "Y", &["B"]).unwrap(), None);
        assert!(!g.is_connected());
    }

    #[test]
    fn unknown_station_is_an_error() {
        let g = path_graph();
        assert_eq!(g.shortest_hops("Q", &["A"]), Err(Error::UnknownStation("Q".into())));
    }

    #[test]
    fn adjacent_path_has_two_nodes() {
        let g = path_graph();
        assert_eq!(g.shortest_path("B", "C").unwrap().unwrap(), vec!["B", "C"]);
    }

    #[test]
    fn ties_prefer_lexicographically_smaller_path() {
        // square o-a-d / o-b-d, declared with b before a
        let g = StationGraph::from_lines(vec![line("L1", &["o", "b", "d"]), line("L2", &["o", "a", "d"])]).unwrap();
        assert_eq!(g.shortest_path("o", "d").unwrap().unwrap(), vec!["o", "a", "d"]);
    }

    #[test]
    fn overlap_examples() {
        let g = StationGraph::from_lines(vec![line("L1", &["A", "B", "C", "D", "E", "F"])]).unwrap();
        assert_eq!(g.overlap_proportion("B", "D", &["B", "C", "D"]).unwrap(), Some(1.0));
        assert_eq!(g.overlap_proportion("A", "B", &["E", "F"]).unwrap(), Some(0.0));
        // path A..E has 5 stations, two of them (C, D) are incident stations
        assert_eq!(g.overlap_proportion("A", "E", &["C", "D"]).unwrap(), Some(0.4));
    }

    #[test]
    fn transfer_station_is_one_node() {
        let g = StationGraph::from_lines(vec![line("L1", &["A", "T", "B"]), line("L2", &["C", "T", "D"])]).unwrap();
        assert_eq!(g.n_stations(), 5);
        assert_eq!(g.lines_of("T").unwrap().len(), 2);
        assert_eq!(g.shortest_hops("A", &["D"]).unwrap(), Some(2));
        assert_eq!(g.diameter(), 2);
    }

    #[test]
    fn grid_paths_match_bfs_oracle() {
        // 4x4 grid built from row and column lines
        let name = |r: usize, c: usize| alloc::format!("g{r}{c}");
        let mut lines = Vec::new();
        for r in 0..4 {
            lines.push((alloc::format!("R{r}"), (0..4).map(|c| name(r, c)).collect()));
        }
        for c in 0..4 {
            lines.push((alloc::format!("C{c}"), (0..4).map(|r| name(r, c)).collect()));
        }
        let g = StationGraph::from_lines(lines).unwrap();
        let mut edges = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                if c + 1 < 4 {
                    edges.push((r * 4 + c, r * 4 + c + 1));
                }
                if r + 1 < 4 {
                    edges.push((r * 4 + c, (r + 1) * 4 + c));
                }
            }
        }
        let mut state = 12345u64;
        for _ in 0..50 {
            state = crate::rng::mix(state);
            let a = (state % 16) as usize;
            let b = ((state >> 20) % 16) as usize;
            if a == b {
                continue;
            }
            let (ia, ib) = (name(a / 4, a % 4), name(b / 4, b % 4));
            let path = g.shortest_path(&ia, &ib).unwrap().unwrap();
            let hops = oracle_hops(&edges, 16, a, &[b]).unwrap();
            assert_eq!(path.len(), hops + 1);
            assert_eq!(g.shortest_hops(&ia, &[ib.as_str()]).unwrap(), Some(hops));
            for w in path.windows(2) {
                assert!(g.neighbors(&w[0]).unwrap().contains(&w[1].as_str()));
            }
        }
    }

    #[test]
    fn triangle_inequality_and_overlap_monotone() {
        let g = StationGraph::from_lines(vec![
            line("L1", &["A", "B", "C", "D", "E"]),
            line("L2", &["F", "C", "G", "H"]),
        ])
        .unwrap();
        let ids: Vec<String> = g.stations().to_vec();
        for a in &ids {
            for b in &ids {
                for c in &ids {
                    let ab = g.shortest_hops(a, &[b]).unwrap().unwrap();
                    let bc = g.shortest_hops(b, &[c]).unwrap().unwrap();
                    let ac = g.shortest_hops(a, &[c]).unwrap().unwrap();
                    assert!(ac <= ab + bc);
                }
            }
        }
        let mut incident: Vec<&str> = Vec::new();
        let mut last = 0.0;
        for s in ["B", "C", "G", "H"] {
            incident.push(s);
            let p = g.overlap_proportion("A", "H", &incident).unwrap().unwrap();
            assert!((0.0..=1.0).contains(&p) && p >= last);
            last = p;
        }
    }
}
