#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use farc_core::Store;
use farc_server::auth::{hash_password, TokenIssuer, DEFAULT_TOKEN_LIFETIME};
use farc_server::{spawn, RunningServer, Service};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::Value as Json;

pub struct Harness {
    pub svc: Arc<Service>,
    pub server: RunningServer,
    pub http: Client,
}

impl Harness {
    /// Service with users `owner`, `other` (password `pw`) and `admin`.
    pub fn start() -> Self {
        Self::with_store(Store::open_in_memory().unwrap())
    }

    pub fn with_store(store: Store) -> Self {
        let store = Arc::new(store);
        for (name, admin) in [("owner", false), ("other", false), ("admin", true)] {
            store.create_user(name, &hash_password("pw"), admin).unwrap();
        }
        let svc = Service::new(store, TokenIssuer::new(b"test secret", DEFAULT_TOKEN_LIFETIME));
        svc.start(4);
        let server = spawn(Arc::clone(&svc), "127.0.0.1:0".parse().unwrap()).unwrap();
        Harness {
            svc,
            server,
            http: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.server.url(), path)
    }

    pub fn token(&self, user: &str) -> String {
        let resp = self
            .http
            .post(self.url("/api/token"))
            .json(&serde_json::json!({"username": user, "password": "pw"}))
            .send()
            .unwrap();
        assert_eq!(resp.status(), 200);
        resp.json::<Json>().unwrap()["token"].as_str().unwrap().to_string()
    }

    pub fn get(&self, path: &str, token: Option<&str>) -> Response {
        auth(self.http.get(self.url(path)), token).send().unwrap()
    }

    pub fn post(&self, path: &str, token: Option<&str>, body: impl Into<reqwest::blocking::Body>) -> Response {
        auth(self.http.post(self.url(path)), token).body(body).send().unwrap()
    }

    pub fn post_json(&self, path: &str, token: Option<&str>, body: &Json) -> Response {
        self.post(path, token, serde_json::to_vec(body).unwrap())
    }

    /// Polls a job until it is terminal.
    pub fn wait_job(&self, id: u64, token: Option<&str>) -> Json {
        let start = Instant::now();
        loop {
            let job: Json = self.get(&format!("/api/jobs/{id}"), token).json().unwrap();
            let status = job["status"].as_str().unwrap().to_string();
            if status == "success" || status == "failed" {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(60), "job {id} did not finish");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn create_project(&self, token: &str, config: &str) -> i64 {
        let resp = self.post("/api/projects", Some(token), config.to_string());
        assert_eq!(resp.status(), 201, "{}", resp.text().unwrap());
        resp.json::<Json>().unwrap()["id"].as_i64().unwrap()
    }

    pub fn add_model(&self, token: &str, project: i64, abbr: &str) -> i64 {
        let resp = self.post_json(
            &format!("/api/projects/{project}/models"),
            Some(token),
            &serde_json::json!({"name": abbr.to_uppercase(), "abbreviation": abbr}),
        );
        assert_eq!(resp.status(), 201, "{}", resp.text().unwrap());
        resp.json::<Json>().unwrap()["id"].as_i64().unwrap()
    }

    /// Uploads and waits; returns the terminal job.
    pub fn upload_forecast(&self, token: &str, model: i64, timezero: &str, forecast: &Json) -> Json {
        let body = serde_json::json!({"timezero": timezero, "forecast": forecast});
        let resp = self.post_json(&format!("/api/models/{model}/forecasts"), Some(token), &body);
        assert_eq!(resp.status(), 202, "{}", resp.text().unwrap());
        let id = resp.json::<Json>().unwrap()["id"].as_u64().unwrap();
        self.wait_job(id, Some(token))
    }

    pub fn upload_truth(&self, token: &str, project: i64, csv: &str) -> Json {
        let resp = self.post(&format!("/api/projects/{project}/truth"), Some(token), csv.to_string());
        assert_eq!(resp.status(), 202, "{}", resp.text().unwrap());
        let id = resp.json::<Json>().unwrap()["id"].as_u64().unwrap();
        self.wait_job(id, Some(token))
    }
}

pub fn auth(req: RequestBuilder, token: Option<&str>) -> RequestBuilder {
    match token {
        Some(t) => req.bearer_auth(t),
        None => req,
    }
}
