//! Brute-force cosine scan with a full sort.

pub struct Hit {
    pub id: String,
    pub similarity: f64,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn knn(rows: &[(String, Vec<f32>)], query: &[f32], k: usize, exclude: Option<&str>) -> Vec<Hit> {
    let mut hits: Vec<Hit> = rows
        .iter()
        .filter(|(id, _)| Some(id.as_str()) != exclude)
        .map(|(id, v)| Hit {
            id: id.clone(),
            similarity: cosine(query, v),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then_with(|| a.id.cmp(&b.id))
    });
    hits.truncate(k);
    hits
}
