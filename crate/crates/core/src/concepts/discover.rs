//! Per-class concept discovery.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bank::{Concept, ConceptBank, Exemplar, BANK_VERSION};
use super::kmeans::{kmeans, KMeansConfig};
use super::{segment_multiresolution, Patch, SegmentConfig};
use crate::error::{Error, Result};
use crate::kernels::squared_distance;
use crate::rng;
use crate::world::{grad_attention, mask_image, occlude_region, LabeledImage, TeacherModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoverConfig {
    /// Number of k-means clusters.
    pub k: usize,
    /// Concepts kept per class.
    pub n_concepts: usize,
    pub min_cluster_size: usize,
    pub min_images: usize,
    /// Attention binarization threshold.
    pub tau: f64,
    /// Disable to cluster every grid patch (no attention filtering).
    pub attention_filter: bool,
    pub segment: SegmentConfig,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    /// Members (closest to the cluster mean first) occluded to score a cluster.
    pub occlusion_members: usize,
    pub n_exemplars: usize,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            k: 15,
            n_concepts: 4,
            min_cluster_size: 5,
            min_images: 20,
            tau: 0.5,
            attention_filter: true,
            segment: SegmentConfig::default(),
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            occlusion_members: 20,
            n_exemplars: 10,
        }
    }
}

impl DiscoverConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub cluster: usize,
    pub members: usize,
    /// `None` for clusters dropped as too small.
    pub importance: Option<f64>,
}

/// Bank plus the intermediate state it was built from.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub bank: ConceptBank,
    pub patches: Vec<Patch>,
    pub assignments: Vec<usize>,
    pub clusters: Vec<ClusterStat>,
    /// Source cluster of each bank concept, in bank order.
    pub concept_clusters: Vec<usize>,
}

impl Discovery {
    pub fn members_of(&self, concept: usize) -> impl Iterator<Item = &Patch> {
        let cluster = self.concept_clusters[concept];
        self.patches
            .iter()
            .zip(&self.assignments)
            .filter(move |(_, &a)| a == cluster)
            .map(|(p, _)| p)
    }
}

pub fn discover_concepts(
    class_images: &[LabeledImage],
    class_id: usize,
    teacher: &TeacherModel,
    fill: &[f64],
    cfg: &DiscoverConfig,
    seed: u64,
) -> Result<ConceptBank> {
    Ok(discover_concepts_detailed(class_images, class_id, teacher, fill, cfg, seed)?.bank)
}

pub fn discover_concepts_detailed(
    class_images: &[LabeledImage],
    class_id: usize,
    teacher: &TeacherModel,
    fill: &[f64],
    cfg: &DiscoverConfig,
    seed: u64,
) -> Result<Discovery> {
    if class_images.len() < cfg.min_images {
        return Err(Error::InvalidArgument(format!(
            "concept discovery needs ≥ {} images, got {}",
            cfg.min_images,
            class_images.len()
        )));
    }
    if cfg.k < cfg.n_concepts || cfg.n_concepts == 0 {
        return Err(Error::InvalidArgument(format!(
            "need K ≥ N ≥ 1 (K={}, N={})",
            cfg.k, cfg.n_concepts
        )));
    }
    if class_id >= teacher.n_classes() {
        return Err(Error::UnknownClass(class_id));
    }

    let mut patches = Vec::new();
    for (local, img) in class_images.iter().enumerate() {
        let mask = if cfg.attention_filter {
            let map = grad_attention(teacher, &img.pixels, class_id)?;
            Some(mask_image(&img.pixels, &map.values, cfg.tau)?)
        } else {
            None
        };
        // Images whose attention leaves nothing are skipped, not fatal.
        match segment_multiresolution(teacher, &img.pixels, mask.as_ref(), local, &cfg.segment) {
            Ok(p) => patches.extend(p),
            Err(Error::EmptySegmentation(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if patches.len() < cfg.k {
        return Err(Error::EmptySegmentation(format!(
            "class {class_id}: {} patches for {} clusters",
            patches.len(),
            cfg.k
        )));
    }

    let features: Vec<Vec<f64>> = patches.iter().map(|p| p.feature.clone()).collect();
    let km = kmeans(
        &features,
        &KMeansConfig {
            k: cfg.k,
            max_iter: cfg.kmeans_max_iter,
            tol: cfg.kmeans_tol,
        },
        &mut rng::stream(seed, "concepts/kmeans", class_id as u64),
    )?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.k];
    for (i, &a) in km.assignments.iter().enumerate() {
        members[a].push(i);
    }

    let base_logits: Vec<f64> = class_images
        .iter()
        .map(|img| teacher.logits(&img.pixels).map(|l| l[class_id]))
        .collect::<Result<_>>()?;

    let mut clusters = Vec::with_capacity(cfg.k);
    for (c, m) in members.iter().enumerate() {
        if m.len() < cfg.min_cluster_size {
            clusters.push(ClusterStat {
                cluster: c,
                members: m.len(),
                importance: None,
            });
            continue;
        }
        let mean = mean_of(m.iter().map(|&i| patches[i].feature.as_slice()));
        let mut ranked = m.clone();
        sort_by_distance(&mut ranked, &patches, &mean);
        let mut drop = 0.0;
        let take = ranked.len().min(cfg.occlusion_members.max(1));
        for &i in &ranked[..take] {
            let p = &patches[i];
            let src = &class_images[p.image_id];
            let occluded = occlude_region(&src.pixels, &p.bbox, fill)?;
            drop += base_logits[p.image_id] - teacher.logits(&occluded)?[class_id];
        }
        clusters.push(ClusterStat {
            cluster: c,
            members: m.len(),
            importance: Some(drop / take as f64),
        });
    }

    let mut eligible: Vec<&ClusterStat> = clusters.iter().filter(|c| c.importance.is_some()).collect();
    if eligible.len() < cfg.n_concepts {
        let census = clusters
            .iter()
            .map(|c| format!("#{}:{}", c.cluster, c.members))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::TooFewConcepts {
            found: eligible.len(),
            needed: cfg.n_concepts,
            census,
        });
    }
    eligible.sort_by(|a, b| {
        b.importance
            .unwrap()
            .total_cmp(&a.importance.unwrap())
            .then(a.cluster.cmp(&b.cluster))
    });

    let mut concepts = Vec::with_capacity(cfg.n_concepts);
    let mut concept_clusters = Vec::with_capacity(cfg.n_concepts);
    for (rank, stat) in eligible.iter().take(cfg.n_concepts).enumerate() {
        let m = &members[stat.cluster];
        let mean = mean_of(m.iter().map(|&i| patches[i].feature.as_slice()));
        let mut ranked = m.clone();
        sort_by_distance(&mut ranked, &patches, &mean);
        let mut dists: Vec<f64> = ranked
            .iter()
            .map(|&i| squared_distance(&patches[i].feature, &mean).sqrt())
            .collect();
        dists.sort_by(f64::total_cmp);
        let p90 = dists[((0.9 * dists.len() as f64).ceil() as usize).clamp(1, dists.len()) - 1];
        let n = m.len() as f64;
        let location = [
            m.iter().map(|&i| patches[i].centroid[0]).sum::<f64>() / n,
            m.iter().map(|&i| patches[i].centroid[1]).sum::<f64>() / n,
        ];
        let mut ws: Vec<usize> = m.iter().map(|&i| patches[i].bbox.width()).collect();
        let mut hs: Vec<usize> = m.iter().map(|&i| patches[i].bbox.height()).collect();
        ws.sort_unstable();
        hs.sort_unstable();
        concepts.push(Concept {
            id: rank,
            mean_feature: mean,
            importance: stat.importance.unwrap(),
            members: m.len(),
            exemplars: ranked
                .iter()
                .take(cfg.n_exemplars)
                .map(|&i| Exemplar {
                    image: class_images[patches[i].image_id].id,
                    bbox: patches[i].bbox,
                })
                .collect(),
            distance_p90: Some(p90),
            location: Some(location),
            box_size: Some([ws[ws.len() / 2], hs[hs.len() / 2]]),
        });
        concept_clusters.push(stat.cluster);
    }

    let bank = ConceptBank {
        version: BANK_VERSION,
        class_id,
        teacher_dim: teacher.feature_dim(),
        config_hash: cfg.hash(),
        concepts,
    };
    bank.validate()?;
    Ok(Discovery {
        bank,
        patches,
        assignments: km.assignments,
        clusters,
        concept_clusters,
    })
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n.max(1) as f64).collect()
}

fn sort_by_distance(idx: &mut [usize], patches: &[Patch], mean: &[f64]) {
    idx.sort_by(|&a, &b| {
        squared_distance(&patches[a].feature, mean)
            .total_cmp(&squared_distance(&patches[b].feature, mean))
            .then(a.cmp(&b))
    });
}
