//! Mock backends, and the HTTP backend when `GEN_BASE_URL` is set.
//!
//! ```text
//! GEN_BASE_URL=http://localhost:8000/v1 GEN_MODEL=my-model cargo run --example generation_backends
//! ```

use histo_icl::context::{base_prompt, Prompt};
use histo_icl::genclient::{backend_from_spec, generate, GenerationRequest};

fn main() -> histo_icl::Result<()> {
    let prompt = Prompt {
        system_text: String::new(),
        user_text: base_prompt().to_string(),
        image_payload: Vec::new(),
        reference: Some("Clear cell renal cell carcinoma, grade 2.".into()),
    };
    let req = GenerationRequest::new(prompt);

    let mut specs = vec!["fixed:No diagnostic abnormality.", "echo-nn", "echo-prompt-hash"];
    if std::env::var_os("GEN_BASE_URL").is_some() {
        specs.push("http");
    }
    for spec in specs {
        let backend = backend_from_spec(spec)?;
        match generate(&req, &*backend) {
            Ok(out) => println!("{:<28} {:?} ({} tokens, {:?})", out.backend_id, out.text, out.token_count, out.latency),
            Err(e) => println!("{spec:<28} error: {e}"),
        }
    }
    Ok(())
}
