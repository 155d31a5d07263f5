use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, MlpSpec, ParamDecl};
use crate::tensor::{Tape, Tensor, Var};

/// For each node, its `k` nearest other nodes by Euclidean distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    /// Build from explicit neighbour lists. Lists must be equally long,
    /// in range, free of self-loops and duplicates.
    pub fn from_lists(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        let k = neighbors.first().map_or(0, Vec::len);
        for (i, list) in neighbors.iter().enumerate() {
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if list.len() != k || seen.len() != k || list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Config(format!("invalid neighbour list for node {i}: {list:?}")));
            }
        }
        Ok(Self { neighbors })
    }

    pub fn nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Graph after relabeling node `i` as `inverse[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        // perm[new] = old
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let neighbors = perm
            .iter()
            .map(|&old| self.neighbors[old].iter().map(|&j| inverse[j]).collect())
            .collect();
        Self { neighbors }
    }
}

/// kNN over the columns of a `C×K` matrix. Ties in distance go to the lower index.
pub fn knn_graph(points: &Tensor, k_nn: usize) -> Result<KnnGraph> {
    let (c, n) = points.dims2("knn_graph")?;
    if k_nn == 0 || k_nn >= n {
        return Err(Error::Config(format!(
            "k_nn must lie in [1, K−1]; got k_nn={k_nn} with K={n}"
        )));
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| points.column(j)).collect();
    let dist2 = |a: usize, b: usize| -> f64 {
        (0..c).map(|r| (cols[a][r] - cols[b][r]).powi(2)).sum()
    };
    let neighbors = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (dist2(i, j), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k_nn).map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph { neighbors })
}

/// EdgeConv layer: for node `i`, `max_j h([x_i ; x_j − x_i])` over its neighbours,
/// where `h` is affine → relu → affine.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub c_in: usize,
    pub c_out: usize,
    mlp: Mlp,
}

impl EdgeConv {
    pub fn new(prefix: &str, c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        let mlp = Mlp::new(
            &format!("{prefix}.mlp"),
            MlpSpec::new(&[2 * c_in, hidden, c_out], Activation::Relu),
        )?;
        Ok(Self { c_in, c_out, mlp })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        self.mlp.decls()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
}

/// Apply one EdgeConv layer to node features `x: C_in×K`.
pub fn edgeconv_layer(
    tape: &mut Tape,
    params: &Bound,
    layer: &EdgeConv,
    x: Var,
    graph: &KnnGraph,
) -> Result<Var> {
    let (c, n) = tape.value(x).dims2("edgeconv")?;
    if c != layer.c_in {
        return Err(Error::shape(
            "edgeconv",
            format!("layer expects {} channels, got {c}", layer.c_in),
        ));
    }
    if graph.nodes() != n {
        return Err(Error::shape(
            "edgeconv",
            format!("graph has {} nodes, features have {n}", graph.nodes()),
        ));
    }
    let k = graph.k();
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let neighbors: Vec<usize> = graph.lists().iter().flatten().copied().collect();
    let xi = tape.index_select(x, 1, &centers)?;
    let xj = tape.index_select(x, 1, &neighbors)?;
    let diff = tape.sub(xj, xi)?;
    let edges = tape.concat(&[xi, diff], 0)?;
    let h = layer.mlp.forward_cols(tape, params, edges)?;
    let h = tape.reshape(h, &[layer.c_out, n, k])?;
    let (out, _) = tape.max_axis(h, 2)?;
    Ok(out)
}

/// The embedding `φ(P)`: EdgeConv layers applied in sequence.
///
/// With `dynamic` unset, `graph` (built from the raw prototypes) is reused by
/// every layer; otherwise each layer rebuilds the graph from its own input.
pub fn embed_prototypes(
    tape: &mut Tape,
    params: &Bound,
    layers: &[EdgeConv],
    prototypes: Var,
    graph: &KnnGraph,
    dynamic: bool,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("at least one EdgeConv layer is required".into()));
    }
    let mut x = prototypes;
    for (l, layer) in layers.iter().enumerate() {
        x = if dynamic && l > 0 {
            let g = knn_graph(tape.value(x), graph.k())?;
            edgeconv_layer(tape, params, layer, x, &g)?
        } else {
            edgeconv_layer(tape, params, layer, x, graph)?
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_example() {
        let p = Tensor::new(&[1, 3], vec![0.0, 1.0, 10.0]).unwrap();
        let g = knn_graph(&p, 1).unwrap();
        assert_eq!(g.lists(), &[vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn full_neighbourhood() {
        let p = Tensor::new(&[2, 4], vec![0.0, 1.0, 3.0, 7.0, 0.5, 0.2, 0.1, 0.0]).unwrap();
        let g = knn_graph(&p, 3).unwrap();
        for i in 0..4 {
            let mut l = g.neighbors(i).to_vec();
            l.sort_unstable();
            let expected: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(l, expected);
        }
    }

    #[test]
    fn equidistant_duplicates_pick_lower_index() {
        let mut data = vec![0.0; 8];
        for (j, v) in data.iter_mut().enumerate() {
            *v = 100.0 + 10.0 * j as f64;
        }
        data[2] = 5.0;
        data[5] = 5.0;
        data[7] = 0.0;
        let p = Tensor::new(&[1, 8], data).unwrap();
        let g = knn_graph(&p, 1).unwrap();
        assert_eq!(g.neighbors(7), &[2]);
    }

    #[test]
    fn k_out_of_range() {
        let p = Tensor::zeros(&[2, 3]);
        assert!(matches!(knn_graph(&p, 3), Err(Error::Config(_))));
        assert!(matches!(knn_graph(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn relabel_is_consistent() {
        let p = Tensor::new(&[1, 4], vec![0.0, 1.0, 3.5, 10.0]).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = p.select_columns(&perm).unwrap();
        assert_eq!(knn_graph(&permuted, 2).unwrap(), knn_graph(&p, 2).unwrap().relabel(&perm));
    }
}
