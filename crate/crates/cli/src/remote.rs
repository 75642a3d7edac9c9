//! OpenAI-compatible chat-completions client.

use std::sync::{Condvar, Mutex};
use std::time::Duration;
use tracehead::pipeline::RemoteConfig;
use tracehead::provider::{CallLog, CallRecord, LlmProvider, Prompt, ProviderError};

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) {
        let mut n = self.free.lock().expect("slots poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("slots poisoned");
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.free.lock().expect("slots poisoned") += 1;
        self.cv.notify_one();
    }
}

pub struct RemoteProvider {
    config: RemoteConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    slots: Slots,
    counters: Mutex<std::collections::BTreeMap<String, usize>>,
    log: CallLog,
}

impl RemoteProvider {
    /// Reads the API key from the environment variable named in the config.
    pub fn new(config: RemoteConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            ProviderError::Auth(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Other(e.to_string()))?;
        Ok(RemoteProvider {
            slots: Slots {
                free: Mutex::new(config.concurrency.max(1)),
                cv: Condvar::new(),
            },
            config,
            api_key,
            client,
            counters: Mutex::new(Default::default()),
            log: CallLog::default(),
        })
    }

    fn request(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "developer", "content": prompt.developer},
                {"role": "user", "content": prompt.user},
            ],
        });
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt.min(6)));
            }
            let resp = match self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
            {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{}: attempt {} failed: {last}", prompt.stage, attempt + 1);
                    continue;
                }
            };
            let status = resp.status();
            if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
                return Err(ProviderError::Auth(format!("HTTP {status}")));
            }
            if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
                last = format!("HTTP {status}");
                log::warn!("{}: attempt {} failed: {last}", prompt.stage, attempt + 1);
                continue;
            }
            if !status.is_success() {
                return Err(ProviderError::Other(format!("HTTP {status}")));
            }
            let v: serde_json::Value = resp
                .json()
                .map_err(|e| ProviderError::Other(format!("invalid response body: {e}")))?;
            return v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| ProviderError::Other("response has no message content".into()));
        }
        Err(ProviderError::Unreachable(last))
    }
}

impl LlmProvider for RemoteProvider {
    fn id(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        let index = {
            let mut c = self.counters.lock().expect("counter poisoned");
            let e = c.entry(prompt.stage.clone()).or_default();
            *e += 1;
            *e - 1
        };
        self.slots.acquire();
        let response = self.request(prompt);
        self.slots.release();
        self.log.push(CallRecord {
            stage: prompt.stage.clone(),
            index,
            prompt: prompt.clone(),
            response: response.clone().map_err(|e| e.to_string()),
        });
        response
    }

    fn log(&self) -> &CallLog {
        &self.log
    }
}
