#![allow(dead_code)]

use std::path::Path;

use galaxyedit::pipeline::types::Task;
use galaxyedit::rating::service::blind_id;
use galaxyedit::rating::{ModelTag, SampleCandidate, SampleItem, SampleSet};
use serde_json::{json, Value};

/// Ratings per (model, task) chosen so the means come out as
/// IP2P 1.6 / 1.9, Inst-Inpaint 2.9, PIPE 3.8, GalaxyEdit 4.0 / 4.1.
pub fn table_ratings(m: ModelTag, t: Task) -> Vec<u8> {
    match (m, t) {
        (ModelTag::Ip2p, Task::Remove) => vec![1, 1, 1, 1, 2, 2, 2, 2, 2, 2],
        (ModelTag::Ip2p, Task::Add) => vec![2, 2, 2, 2, 2, 2, 2, 2, 2, 1],
        (ModelTag::InstInpaint, Task::Remove) => vec![3, 3, 3, 3, 3, 3, 3, 3, 3, 2],
        (ModelTag::Pipe, Task::Add) => vec![4, 4, 4, 4, 4, 4, 4, 4, 3, 3],
        (ModelTag::GalaxyEdit, Task::Remove) => vec![4; 10],
        (ModelTag::GalaxyEdit, Task::Add) => vec![4, 4, 4, 4, 4, 4, 4, 4, 4, 5],
        // Twenty ratings over both tasks: sixteen 5s and four 4s, 4.8.
        (ModelTag::GroundTruth, Task::Remove) => vec![5, 5, 5, 5, 5, 5, 5, 5, 4, 4],
        (ModelTag::GroundTruth, Task::Add) => vec![5, 5, 5, 5, 5, 5, 5, 5, 4, 4],
        _ => Vec::new(),
    }
}

fn models(t: Task) -> [ModelTag; 4] {
    match t {
        Task::Remove => [ModelTag::Ip2p, ModelTag::InstInpaint, ModelTag::GalaxyEdit, ModelTag::GroundTruth],
        Task::Add => [ModelTag::Ip2p, ModelTag::Pipe, ModelTag::GalaxyEdit, ModelTag::GroundTruth],
    }
}

/// Ten remove and ten add items. Media paths deliberately carry model
/// names so a leak through URLs would show.
pub fn rating_fixture(dir: &Path) -> SampleSet {
    let png = |rel: &str, shade: u8| {
        let p = dir.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([shade, 0, 0])).save(&p).unwrap();
    };
    let mut items = Vec::new();
    for (prefix, task) in [("r", Task::Remove), ("a", Task::Add)] {
        for i in 0..10 {
            let id = format!("{prefix}{i:02}");
            png(&format!("source/{id}.png"), i as u8);
            let candidates = models(task)
                .iter()
                .map(|m| {
                    let rel = format!("{}/{id}.png", m.name());
                    png(&rel, 100 + i as u8);
                    SampleCandidate { model: *m, image: rel }
                })
                .collect();
            items.push(SampleItem {
                item_id: id.clone(),
                task,
                source: format!("source/{id}.png"),
                instruction: format!("{} the object {i}", task.name()),
                candidates,
            });
        }
    }
    SampleSet::new(items, dir.to_path_buf()).unwrap()
}

/// The planted rating of one candidate.
pub fn planted(samples: &SampleSet, session: &str, item_id: &str, blind: &str) -> u8 {
    let item = samples.item(item_id).unwrap();
    let m = item
        .candidates
        .iter()
        .map(|c| c.model)
        .find(|&m| blind_id(session, item_id, m) == blind)
        .unwrap();
    let idx: usize = item_id[1..].parse().unwrap();
    table_ratings(m, item.task)[idx]
}

/// Collects every client-facing header and JSON body.
#[derive(Default)]
pub struct Recorder {
    pub bytes: Vec<String>,
}

impl Recorder {
    fn headers(&mut self, resp: &reqwest::blocking::Response) {
        for (k, v) in resp.headers() {
            self.bytes.push(format!("{k}: {}", v.to_str().unwrap_or("")));
        }
    }

    pub fn json(&mut self, resp: reqwest::blocking::Response) -> (u16, Value) {
        self.headers(&resp);
        let status = resp.status().as_u16();
        let body = resp.text().unwrap();
        self.bytes.push(body.clone());
        (status, serde_json::from_str(&body).unwrap_or(Value::String(body)))
    }

    /// Image bodies are binary; only their headers are recorded.
    pub fn media(&mut self, resp: reqwest::blocking::Response) -> u16 {
        self.headers(&resp);
        let status = resp.status().as_u16();
        let _ = resp.bytes().unwrap();
        status
    }
}

pub struct Transcript {
    pub session_id: String,
    pub bytes: Vec<String>,
    pub acked: usize,
}

/// Drives one full session over HTTP, rating every candidate with its
/// planted value.
pub fn rate_all(base: &str, samples: &SampleSet) -> Transcript {
    let http = reqwest::blocking::Client::new();
    let mut rec = Recorder::default();
    let (status, session) = rec.json(http.post(format!("{base}/sessions")).json(&json!({"evaluator_id": "ev-1", "seed": 11})).send().unwrap());
    assert_eq!(status, 201, "{session}");
    let sid = session["session_id"].as_str().unwrap().to_string();
    let mut acked = 0;
    loop {
        let (status, next) = rec.json(http.get(format!("{base}/sessions/{sid}/next")).send().unwrap());
        assert_eq!(status, 200, "{next}");
        if next["done"].as_bool().unwrap() {
            break;
        }
        let item = &next["item"];
        let item_id = item["item_id"].as_str().unwrap();
        assert_eq!(rec.media(http.get(format!("{base}{}", item["source"].as_str().unwrap())).send().unwrap()), 200);
        for c in item["candidates"].as_array().unwrap() {
            let blind = c["blind_id"].as_str().unwrap();
            assert_eq!(rec.media(http.get(format!("{base}{}", c["image"].as_str().unwrap())).send().unwrap()), 200);
            let rating = planted(samples, &sid, item_id, blind);
            let body = json!({"session_id": sid, "item_id": item_id, "blind_id": blind, "rating": rating});
            let (st, ack) = rec.json(http.post(format!("{base}/ratings")).json(&body).send().unwrap());
            assert_eq!(st, 200, "{ack}");
            acked += 1;
        }
    }
    Transcript {
        session_id: sid,
        bytes: rec.bytes,
        acked,
    }
}

/// Model names found in client-facing bytes.
pub fn leaks(bytes: &[String]) -> Vec<String> {
    let needles = ModelTag::needles();
    bytes
        .iter()
        .flat_map(|b| {
            let lower = b.to_lowercase();
            needles.iter().filter(move |n| lower.contains(n.as_str())).cloned().collect::<Vec<_>>()
        })
        .collect()
}
