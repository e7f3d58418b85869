use histo_icl::aggregator::AggregatorWeights;

pub struct OracleOutput {
    pub projected: Vec<Vec<f64>>,
    /// attention[layer][head][query][patch]
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
}

fn at(w: &[f32], cols: usize, r: usize, c: usize) -> f64 {
    f64::from(w[r * cols + c])
}

fn layer_norm(x: &[f64], scale: &[f32], bias: &[f32]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / d;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * f64::from(scale[i]) + f64::from(bias[i]))
        .collect()
}

/// `x (len r) · W (r × c)` one scalar at a time.
fn vec_mat(x: &[f64], w: &[f32], c: usize) -> Vec<f64> {
    (0..c)
        .map(|j| (0..x.len()).map(|i| x[i] * at(w, c, i, j)).sum())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn forward(w: &AggregatorWeights, n: usize, patches: &[f32]) -> OracleOutput {
    let c = w.config;
    let d = c.d;
    let dh = d / c.heads;
    let mut x: Vec<Vec<f64>> = (0..c.m)
        .map(|t| (0..d).map(|j| at(&w.queries, d, t, j)).collect())
        .collect();
    let mut attention = Vec::new();
    for layer in &w.layers {
        let kv: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                let row: Vec<f64> = (0..d).map(|j| at(patches, d, p, j)).collect();
                layer_norm(&row, &layer.ln_patch.scale, &layer.ln_patch.bias)
            })
            .collect();
        let keys: Vec<Vec<f64>> = kv.iter().map(|r| vec_mat(r, &layer.w_k, d)).collect();
        let values: Vec<Vec<f64>> = kv.iter().map(|r| vec_mat(r, &layer.w_v, d)).collect();
        let mut maps = vec![vec![vec![0.0; n]; c.m]; c.heads];
        let mut next = x.clone();
        for t in 0..c.m {
            let qn = layer_norm(&x[t], &layer.ln_query.scale, &layer.ln_query.bias);
            let q = vec_mat(&qn, &layer.w_q, d);
            let mut concat = vec![0.0; d];
            for h in 0..c.heads {
                let lo = h * dh;
                let logits: Vec<f64> = (0..n)
                    .map(|p| (lo..lo + dh).map(|j| q[j] * keys[p][j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for p in 0..n {
                    maps[h][t][p] = exps[p] / z;
                    for j in lo..lo + dh {
                        concat[j] += maps[h][t][p] * values[p][j];
                    }
                }
            }
            let attn_out = vec_mat(&concat, &layer.w_o, d);
            for j in 0..d {
                next[t][j] += attn_out[j];
            }
        }
        x = next;
        for t in 0..c.m {
            let hn = layer_norm(&x[t], &layer.ln_ff.scale, &layer.ln_ff.bias);
            let hidden: Vec<f64> = vec_mat(&hn, &layer.w_1, c.d_ff).into_iter().map(gelu).collect();
            let ff = vec_mat(&hidden, &layer.w_2, d);
            for j in 0..d {
                x[t][j] += ff[j];
            }
        }
        attention.push(maps);
    }
    let projected = x
        .iter()
        .map(|row| {
            vec_mat(row, &w.proj_w, d)
                .into_iter()
                .enumerate()
                .map(|(j, v)| v + f64::from(w.proj_b[j]))
                .collect()
        })
        .collect();
    OracleOutput { projected, attention }
}

pub fn mean_normalize(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    mean.iter().map(|v| v / norm).collect()
}
