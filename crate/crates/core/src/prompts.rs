//! Prompt templates for every agent and judge call. Inputs are substituted
//! verbatim; the reference agents in [`crate::reference`] parse these exact
//! layouts, so changes here must be mirrored there.

/// Marker lines the rule-based agents key on.
pub mod markers {
    pub const TASK: &str = "Multi-document task description: ";
    pub const METADATA_FIELDS: &str = "Available metadata fields:";
    pub const NORM_TASK: &str = "Complex problem description: ";
    pub const NORM_DIALOG: &str = "Complete dialog record of sub-question answers:";
    pub const NORM_EXEMPLAR: &str = "json data of the original conversation record:";
    pub const NORM_NEW: &str = "new conversation record:";
    pub const CODE_TASK: &str = "task description: ";
    pub const CODE_PATH: &str = "path to the json data: ";
    pub const FINAL_TASK: &str = "[task]: ";
    pub const FINAL_RUN: &str = "[code_resp]:";
    pub const FINAL_RUN_END: &str = "[end code_resp]";
    pub const CELL_ROW: &str = "One gold source row";
    pub const CELL_METRICS: &str = "Metric columns to judge from this row";
    pub const CELL_DIALOG: &str = "Complete dialog record of all sub-question answers on this document:";
    pub const RAG_SOURCE: &str = "Information (list) needed to answer the question";
    pub const RAG_INFO: &str = "Information extracted by the model (each part separated by <next chunk> is independent of each other):";
    pub const RAG_CORRECT_SIDE: &str = "number of intersections";
    pub const RAG_ERROR_SIDE: &str = "error_extractions = number of incorrect or missing entries";
    pub const FINAL_REFERENCE: &str = "Multi-document reference answer: ";
    pub const FINAL_MODEL: &str = "Model's answer: ";
    pub const READER_QUESTION: &str = "Question: ";
}

use markers::*;

pub const CHUNK_SEPARATOR: &str = "\n<next chunk>\n";

pub fn plan(task: &str, metadata_description: &str) -> (String, String) {
    let system = "You are a multi-document problem decomposition and query assistant.".to_string();
    let user = format!(
        "You are a multi-document problem decomposition and query assistant. The user is provided with a metadata description of a complex task and multiple documents. Each document has a unique metadata identifier, and instead of answering the final question directly, you need to design specialized query templates for each document so that you can extract information from it that is relevant to the overall task and organize these subqueries in a reasonable order. Also you need to generate the query templates based on using the same language as the language of user's task. For example, if the user speaks Chinese, you generate the query template in Chinese.

Question template specification:
1. Single Document Oriented: Each sub-question template must focus on a single document to ensure that the required information can be located within that document.
2. Semantic Mutual Exclusivity: different templates should be independent of each other in meaning and not duplicated; populated to be able to ask questions naturally and smoothly and logically self-consistent.
3. Metadata Placement: all available metadata fields are placed by {{}} in at least one template, while all metadata fields must use naming consistent with the metadata field description when placed in templates.
4. Metadata constraints (optional): for each sub-question template, metadata can be constrained. If you think that answering a multi-document question requires that this sub-question template restricts a certain (some) metadata, please use the name of that metadata as a label, with all possible values listed in list format within the label. For example: \"restriction\": {{\"year\": [\"2021\", \"2022\"]}}. If there is no restriction, the field can be left out.

User-supplied information:
- {TASK}{task}
- {METADATA_FIELDS}
{metadata_description}

Output format (JSON only; no extra text):
[
  {{
    \"subtask\": \"Format template for subquestion\",
    \"restriction\": {{\"year\": [\"2021\",\"2022\"]}}
  }},
  {{
    \"subtask\": \"Format template for subquestion\"
  }}
]"
    );
    (system, user)
}

pub const PLAN_REPAIR: &str = "\n\nYour previous reply could not be used: {error}. Reply again with only the JSON list described above.";

pub fn reader(doc_id: &str, query: &str, excerpts: &[String]) -> (String, String) {
    let system = format!(
        "Answer the question using only the provided document excerpts. If the excerpts do not contain the answer, reply exactly {}.",
        crate::extractor::NOT_FOUND
    );
    let mut user = format!("Document: {doc_id}\n{READER_QUESTION}{query}\n\nExcerpts:\n");
    for (i, e) in excerpts.iter().enumerate() {
        user.push_str(&format!("[excerpt {}]\n{}\n", i + 1, e));
    }
    (system, user)
}

/// Flat retrieval prompt, optionally prefixed with the metadata listing.
pub fn flat_rag(question: &str, excerpts: &[String], document_info: Option<&str>) -> (String, String) {
    let system = "Answer the question using the retrieved excerpts from the document collection.".to_string();
    let mut user = String::new();
    match document_info {
        Some(info) => user.push_str(&format!(
            "The list of document metadata you can query is as follows: \n{info}\n\nYou need to answer the question:\n{question}\n"
        )),
        None => user.push_str(&format!("You need to answer the question:\n{question}\n")),
    }
    user.push_str("\nRetrieved excerpts:\n");
    user.push_str(&excerpts.join(CHUNK_SEPARATOR));
    (system, user)
}

pub fn norm_schema(task: &str, multi_conversation: &str) -> (String, String) {
    let system = "You are an expert in structured data extraction.".to_string();
    let user = format!(
        "You are an expert in structured data extraction, extract structured data related to complex tasks directly from multiple sub-question answered conversations and transform it into json format, the final output json data should be easily scalable when transform similar conversations to json. Also you need to generate schema based on using the same language as the users's task language. For example, if the user speaks Chinese, you generate the query template in Chinese.

Input information:
1. {NORM_TASK}{task}
2. {NORM_DIALOG}
{multi_conversation}

Processing requirements:
- extract all specific data values (numbers, options, measurements, etc.) related to the complex task and standardize the units of measurement.
- identify variable types and add metadata:
  - Classification variables: list the values that actually occur
  - Ordinal variables: Preserve sequential relationships
  - Quantitative variables: specify the units used
- For information not provided by the user, keep it as null.
- Naming of variables should reflect the meaning of the variable and the unit of measure.
- ideal json structure must just have one level, no nested structure and can be easily analysis by python code.

Output format:
Please output data surrounded by <json>...</json> (must be a JSON list[dict]), and add a brief schema with <des>...</des>."
    );
    (system, user)
}

pub fn norm_continuation(exemplar_json: &str, new_conversation: &str) -> (String, String) {
    let system = "You are a json continuation helper.".to_string();
    let user = format!(
        "You are a json continuation helper that converts new conversation records to json data based on the original conversation record converted json data (list[dict]) format provided by the user, which is easy to merge with the original data.

Input information:
1. {NORM_EXEMPLAR}
{exemplar_json}
2. {NORM_NEW}
{new_conversation}

Processing requirements:
1. Convert the new conversation record to json format, making sure it is consistent with the original data structure.
2. Maintain consistency in variable naming and units of measure.
3. Make sure the new json data can be seamlessly connected to the original data.

Output Format:
Please enclose your extended section with <json>...</json> (a list[dict] that can be concatenated to the original data with + in Python)."
    );
    (system, user)
}

pub const NORM_REPAIR: &str = "\n\nYour previous reply could not be used: {error}. Reply again following the output format exactly.";

pub fn code(task: &str, json_data: &str, json_path: &str, json_schema: &str) -> (String, String) {
    let system = "You are a question answering expert who writes Python analysis code.".to_string();
    let user = format!(
        "You are a question answering expert, the user will provide a complex task and multiple copies of related json data and their paths, you need to write code based on this data to get the data needed to answer the question. Please note for each available, the user only provides the few shot of original json data (list[dict]) for you to write code for this task, and the user will provide the path to the json data, you need to read the json data from the user-provided path, execute the code will directly solve the task ideally.

Input information:
1. {CODE_TASK}{task}
2. available json data (few shot):
{json_data}
3. {CODE_PATH}{json_path}
   (the same path is passed as the first command-line argument and in the MUDA_DATA_PATH environment variable)
4. schema of the json data:
{json_schema}

Processing requirements:
1. Analyze the task description to identify key issues and data requirements.
2. Based on the json data provided, write executable python code to read the json data from the user-provided path and extract the required information.
3. The code output should be readable, ideally the code output should answer the task directly.

Output format:
Wrap your code in <execute>...</execute> and you can add necessary explanations outside the tags."
    );
    (system, user)
}

pub const CODE_REPAIR: &str = "\n\nThe previous program failed:\n<previous_code>\n{code}\n</previous_code>\nIt exited with code {exit_code} and this error output:\n{stderr}\nFix the program and reply again with the full code inside <execute>...</execute>.";

pub const CODE_FORMAT_REPAIR: &str = "\n\nYour previous reply contained no <execute>...</execute> block. Reply again with the code wrapped in <execute>...</execute>.";

pub fn final_answer(task: &str, data: &str, code: &str, code_resp: &str) -> (String, String) {
    let system = "You write the final answer to an analytical question.".to_string();
    let user = format!(
        "The user is provided with a complex task, JSON data description, Python code, and run results. Produce the final concise answer (in the user's language).

Inputs:
{FINAL_TASK}{task}
[data]:
{data}
[code]:
{code}
{FINAL_RUN}
{code_resp}
{FINAL_RUN_END}"
    );
    (system, user)
}

#[allow(clippy::too_many_arguments)]
pub fn judge_cells(
    question: &str,
    source_headers: &str,
    row_index: usize,
    source_row: &str,
    aligned_doc_meta: &str,
    metric_total: usize,
    metric_columns: &str,
    agent_conversation: &str,
) -> (String, String) {
    let system = "You are a strict evaluator of information extraction.".to_string();
    let user = format!(
        "The user will provide:
1. Multi-document question: {question}
2. Source table headers: {source_headers}
3. {CELL_ROW} (row_index = {row_index}): {source_row}
4. Aligned target document metadata (already matched by the dataset, do not judge metadata again): {aligned_doc_meta}
5. {CELL_METRICS} (metric_total = {metric_total}): {metric_columns}
6. {CELL_DIALOG}
{agent_conversation}

Evaluation Criteria:
1. Judge only against this single gold row and this single document dialog.
2. This gold row has already been aligned to the correct document by the dataset metadata. Treat the document identity as given.
3. Do not score metadata fields in this step. Judge only the metric columns in this row one by one.
4. A metric column counts as correct only if the document dialog contains the same core fact under the correct symbol and year context.
5. For numeric columns, treat the extraction as correct if the integer digits and the first decimal place are correct, unless the task clearly requires exact discrete identifiers.
6. Extra information in the dialog does not hurt correctness.
7. Count each column at most once.

TASK:
1. Return only the metric fields that are correctly supported by the dialog.

Constraints:
1. correct_metric_fields must contain only field names from the provided metric columns.
2. If none are correct, return an empty list.

Return JSON only:
{{
  \"correct_metric_fields\": [\"<metric field name>\"]
}}"
    );
    (system, user)
}

pub fn judge_rag_correct(len_source: usize, source_answer: &str, info: &str) -> (String, String) {
    let system = "You are a strict evaluator of information extraction.".to_string();
    let user = format!(
        "The user will provide:
1. {RAG_SOURCE} (total_required = {len_source}): {source_answer}
2. {RAG_INFO}
{info}

Evaluation Criteria:
1. If the information extracted by the model contains the key information with true entity from the reference, the correct extraction is added by one.
2. If the information does not match the entity or does not provide the entity information, it is judged incorrect and the number of correct extractions remains unchanged.
3. If the key information is missing or does not match the reference, it is judged incorrect and the number of correct extractions remains unchanged.
4. If the extraction is missing or does not match the reference information, it is judged incorrect and the number of correct extractions remains unchanged.
5. If the extracted information involves numerical values, the model is considered correct as long as it correctly extracts integer digits and the first decimal place.

Note: If the extraction of the model contains information other than the reference information or uses a different language, this does not affect the determination. Multiple correct extractions of the same information are counted only once.

TASK: Calculate the {RAG_CORRECT_SIDE} between the information extracted by the model and the information that needs to be extracted.

Return JSON:
{{
  \"correct_extractions\": <number of correct entries>,
  \"total_required\": {len_source},
  \"explanation\": \"...\"
}}"
    );
    (system, user)
}

pub fn judge_rag_error(len_source: usize, source_answer: &str, info: &str) -> (String, String) {
    let system = "You are a strict evaluator of information extraction.".to_string();
    let user = format!(
        "The user will provide:
1. {RAG_SOURCE} (total_required = {len_source}): {source_answer}
2. {RAG_INFO}
{info}

Evaluation Criteria:
1. Treat the reference information list as the gold standard.
2. For each required entry in the reference list, check all extracted chunks:
3. If at least one chunk correctly contains the key information with the true entity, this entry is counted as correctly extracted.
4. If the key information is missing, conflicts with the reference (wrong entity/value), or is otherwise incorrect, this entry is counted as an error.
5. If the extracted information involves numerical values, the model is considered correct as long as it correctly extracts integer digits and the first decimal place.
6. Extra information that is not in the reference list, or uses a different language, does not affect the judgment. Only the correctness of the required entries is considered.
7. Multiple correct extractions of the same reference entry are counted only once.
8. error_extractions is the number of required entries that are incorrect or missing (i.e., entries in the reference list that do not have a correct extraction).

TASK: You are asked to consider each part of the model output separated by <next chunk> as a piece of information extracted by the model, and compute:
1. {RAG_ERROR_SIDE} among the required information.
2. total_required = {len_source}.

Return JSON only:
{{
  \"error_extractions\": <number of incorrect or missing entries>,
  \"total_required\": {len_source},
  \"explanation\": \"your simple explanation\"
}}"
    );
    (system, user)
}

pub fn judge_final(question: &str, final_answer: &str, model_answer: &str) -> (String, String) {
    let system = "You are a strict evaluator of final answers.".to_string();
    let user = format!(
        "The user will provide:
1. Multi-document question: {question}
2. {FINAL_REFERENCE}{final_answer}
3. {FINAL_MODEL}{model_answer}

Evaluation Criteria:
1. Model's answer will be judged as correct if it contains the key information in the reference answer.
2. If the key information is missing or the answer does not match the reference answer, the answer will be judged as incorrect.
3. If the answer is missing or does not match the reference answer, the answer is judged as incorrect.
4. If the answer involves a numerical value, it is considered correct as long as the model answers the whole number of digits and the first decimal place correctly.

Note: If a model answer contains additional information beyond the reference answer or use different language, this does not affect the judgment as correct.

TASK: Determine whether the model's final answer is correct with respect to the reference answer.
Return JSON:
{{\"is_correct\": true/false, \"explanation\": \"...\"}}"
    );
    (system, user)
}

pub const JUDGE_REPAIR: &str = "\n\nYour previous reply was not valid JSON in the requested shape. Return only the JSON object.";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_prompts_carry_numeric_rule() {
        for (_, user) in [
            judge_final("q", "106.47", "106.4"),
            judge_rag_correct(1, "[]", ""),
            judge_rag_error(1, "[]", ""),
            judge_cells("q", "h", 0, "r", "m", 1, "[]", "d"),
        ] {
            assert!(user.contains("first decimal place"), "{user}");
        }
    }

    #[test]
    fn metadata_prompt_prefix() {
        let (_, user) = flat_rag("Q?", &["a".into()], Some("- d1: x=1"));
        assert!(user.starts_with("The list of document metadata you can query is as follows:"));
        let (_, plain) = flat_rag("Q?", &["a".into()], None);
        assert!(!plain.contains("document metadata"));
    }

    #[test]
    fn plan_prompt_embeds_inputs() {
        let (_, user) = plan("Which company?", "ticker_symbol: x (identifier)");
        assert!(user.contains("Multi-document task description: Which company?"));
        assert!(user.contains("\"restriction\": {\"year\": [\"2021\", \"2022\"]}"));
        assert!(user.contains("placed by {} in at least one template"));
    }
}
