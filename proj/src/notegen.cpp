#include "mmcl/notegen.hpp"

#include <httplib.h>

#include <algorithm>
#include <json.hpp>
#include <set>
#include <sstream>

#include "mmcl/tokenizer.hpp"

namespace mmcl {

using ordered_json = nlohmann::ordered_json;

std::string_view strategy_code(Strategy s) {
  switch (s) {
    case Strategy::M:
      return "M";
    case Strategy::M_P1:
      return "M_P1";
    case Strategy::M_P2:
      return "M_P2";
    case Strategy::P3:
      return "P3";
  }
  return "M";
}

std::string_view strategy_title(Strategy s) {
  switch (s) {
    case Strategy::M:
      return "M";
    case Strategy::M_P1:
      return "M + P1";
    case Strategy::M_P2:
      return "M + P2";
    case Strategy::P3:
      return "P3";
  }
  return "M";
}

std::optional<Strategy> parse_strategy(std::string_view text) {
  std::string key;
  for (char c : to_lower(text)) {
    if (c != ' ' && c != '_' && c != '+') key.push_back(c);
  }
  if (key == "m") return Strategy::M;
  if (key == "mp1") return Strategy::M_P1;
  if (key == "mp2") return Strategy::M_P2;
  if (key == "p3" || key == "mp3") return Strategy::P3;
  return std::nullopt;
}

AttributeVocabulary::AttributeVocabulary(
    std::vector<std::pair<std::string, std::vector<std::string>>> attrs)
    : attrs_(std::move(attrs)) {
  for (auto& [name, options] : attrs_) {
    name = to_lower(trim(name));
    if (options.empty()) throw Error("attribute \"" + name + "\" has no options");
    for (auto& o : options) o = to_lower(trim(o));
  }
}

const std::vector<std::string>* AttributeVocabulary::options(std::string_view attribute) const {
  for (const auto& [name, options] : attrs_) {
    if (name == attribute) return &options;
  }
  return nullptr;
}

bool AttributeVocabulary::allows(std::string_view attribute, std::string_view option) const {
  const auto* opts = options(attribute);
  return opts && std::find(opts->begin(), opts->end(), option) != opts->end();
}

const AttributeVocabulary& default_vocabulary() {
  static const AttributeVocabulary vocab({
      {"symmetry", {"symmetric", "asymmetric in one axis", "asymmetric in two axes"}},
      {"border", {"regular", "irregular", "well-defined", "ill-defined"}},
      {"color",
       {"light brown", "dark brown", "tan", "black", "blue-gray", "red", "pink", "white"}},
      {"dermoscopic structures",
       {"pigment network", "dots", "globules", "streaks", "blue-white veil", "arborizing vessels",
        "milia-like cysts", "scale", "structureless areas"}},
      {"lesion type", {"macule", "papule", "nodule", "plaque", "patch"}},
  });
  return vocab;
}

std::string prompt_hash(std::string_view prompt) { return sha256_hex(prompt).substr(0, 16); }

std::string template_sentence(Label label, const std::optional<std::string>& subclass,
                              const Taxonomy& taxonomy) {
  std::string s = "The image includes a ";
  s += malignancy_name(taxonomy.malignancy_of(label));
  s += " skin lesion, specifically a ";
  s += label_name(label);
  if (subclass && !subclass->empty()) {
    s += " (specifically a ";
    s += *subclass;
    s += ")";
  }
  return s;
}

ClinicalNote render_template(const SampleRecord& record, const Taxonomy& taxonomy) {
  ClinicalNote note;
  note.sample_id = record.id;
  note.text = template_sentence(record.label, record.subclass, taxonomy);
  note.strategy = Strategy::M;
  note.prompt_hash = prompt_hash("");
  note.backend_id = "template";
  return note;
}

namespace {

void append_option_lists(std::ostringstream& os, const AttributeVocabulary& vocab) {
  for (auto attr : kConstrainedAttributes) {
    const auto* opts = vocab.options(attr);
    if (!opts) throw Error("vocabulary lacks attribute \"" + std::string(attr) + "\"");
    const bool multi = attr == "color" || attr == "dermoscopic structures";
    os << "- " << attr << (multi ? " (one or more)" : " (exactly one)") << ": ["
       << join(*opts, " | ") << "]\n";
  }
}

}  // namespace

std::string build_prompt(const SampleRecord* record, Strategy strategy,
                         const AttributeVocabulary& vocab, const Taxonomy& taxonomy) {
  std::ostringstream os;
  switch (strategy) {
    case Strategy::M:
      throw Error("strategy M fills the template directly and has no prompt");
    case Strategy::M_P1:
      if (!record) throw Error("strategy M_P1 requires a record");
      os << "You are assisting with the annotation of dermatology images.\n"
         << "Clinical note: \"" << template_sentence(record->label, record->subclass, taxonomy)
         << ".\"\n"
         << "Repeat the clinical note, then describe the lesion by selecting options for each "
            "attribute below. Use only the listed options.\n";
      append_option_lists(os, vocab);
      os << "Answer with one sentence per attribute in the form \"<attribute>: <options>.\"\n";
      return os.str();
    case Strategy::M_P2:
      if (!record) throw Error("strategy M_P2 requires a record");
      os << "You are assisting with the annotation of dermatology images.\n"
         << "Clinical note: \"" << template_sentence(record->label, record->subclass, taxonomy)
         << ".\"\n"
         << "Repeat the clinical note, then describe the lesion in your own words, covering its "
         << join(kDescriptiveAttributes, ", ")
         << ". Stay consistent with the diagnosis in the note.\n"
         << "Answer with one sentence per characteristic in the form "
            "\"<characteristic>: <description>.\"\n";
      return os.str();
    case Strategy::P3: {
      if (record) throw Error("strategy P3 must not receive record metadata");
      os << "You are assisting with the annotation of dermatology images.\n"
         << "Describe the skin lesion by selecting options for each attribute below, then "
            "classify it. Use only the listed options.\n";
      append_option_lists(os, vocab);
      std::vector<std::string> classes;
      for (Label l : kAllLabels) {
        classes.push_back(std::string(label_name(l)) + " (" + std::string(label_code(l)) + ")");
      }
      os << "- candidate classes (exactly one): [" << join(classes, " | ") << "]\n"
         << "Answer with one sentence per attribute in the form \"<attribute>: <options>.\" and "
            "finish with \"Proposed class: <benign|malignant> skin lesion, specifically a "
            "<class>.\"\n";
      return os.str();
    }
  }
  throw Error("unknown strategy");
}

std::string TemplateBackend::generate(const GenerationRequest&) {
  throw BackendError("the template backend cannot answer prompts");
}

namespace {

struct ClassProfile {
  std::vector<std::string> symmetry;
  std::vector<std::string> border;
  std::vector<std::string> color;
  std::vector<std::string> structures;
  std::vector<std::string> lesion_type;
  std::vector<std::string> surface;
};

const ClassProfile& profile_of(Label label) {
  static const std::array<ClassProfile, kNumClasses> kProfiles = {{
      // BEK
      {{"symmetric", "asymmetric in one axis"},
       {"well-defined", "regular"},
       {"light brown", "tan"},
       {"milia-like cysts", "structureless areas"},
       {"plaque", "papule"},
       {"waxy", "rough"}},
      // NEV
      {{"symmetric"},
       {"regular", "well-defined"},
       {"light brown", "dark brown"},
       {"pigment network", "globules"},
       {"macule", "papule"},
       {"smooth"}},
      // ACK
      {{"asymmetric in one axis"},
       {"ill-defined"},
       {"red", "pink"},
       {"scale", "structureless areas"},
       {"patch", "macule"},
       {"scaly", "rough"}},
      // BCC
      {{"asymmetric in one axis", "symmetric"},
       {"well-defined"},
       {"pink", "white", "blue-gray"},
       {"arborizing vessels"},
       {"nodule", "papule"},
       {"shiny", "pearly"}},
      // MEL
      {{"asymmetric in two axes"},
       {"irregular", "ill-defined"},
       {"black", "dark brown", "blue-gray"},
       {"streaks", "blue-white veil", "dots"},
       {"macule", "plaque"},
       {"uneven"}},
  }};
  return kProfiles[label_index(label)];
}

const std::vector<std::string> kSurfaceOptions = {"smooth", "waxy",  "rough",  "scaly",
                                                  "shiny",  "pearly", "uneven"};

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

// Picks `count` distinct options; grounded draws prefer the class profile.
std::vector<std::string> pick(Rng& rng, const std::vector<std::string>& profile,
                              const std::vector<std::string>& all, std::size_t count,
                              bool grounded, double fidelity) {
  std::vector<std::string> out;
  std::size_t guard = 0;
  while (out.size() < count && guard++ < 64) {
    const auto& pool = (grounded && rng.bernoulli(fidelity)) ? profile : all;
    const auto& choice = pool[rng.index(pool.size())];
    if (std::find(out.begin(), out.end(), choice) == out.end()) out.push_back(choice);
  }
  return out;
}

std::optional<std::string> quoted_note(std::string_view prompt) {
  static constexpr std::string_view kKey = "Clinical note: \"";
  auto b = prompt.find(kKey);
  if (b == std::string_view::npos) return std::nullopt;
  b += kKey.size();
  auto e = prompt.find(".\"", b);
  if (e == std::string_view::npos) return std::nullopt;
  return std::string(prompt.substr(b, e - b));
}

}  // namespace

MockBackend::MockBackend(MockBackendConfig config, const AttributeVocabulary& vocab,
                         Taxonomy taxonomy)
    : config_(config), vocab_(vocab), taxonomy_(taxonomy) {
  if (config_.corruption_rate < 0.0 || config_.corruption_rate > 1.0) {
    throw Error("corruption_rate must lie in [0, 1]");
  }
}

Label MockBackend::asserted_label(const GenerationRequest& request) const {
  Rng rng(derive_seed(request.seed, "mock/label"));
  const bool corrupt = rng.bernoulli(config_.corruption_rate);
  const Label drawn = kAllLabels[rng.index(kNumClasses)];
  if (corrupt || !request.grounding) return drawn;
  return *request.grounding;
}

std::string MockBackend::generate(const GenerationRequest& request) {
  if (request.strategy == Strategy::M) throw BackendError("strategy M does not use a backend");
  Rng rng(derive_seed(request.seed, "mock/attributes"));
  const Label label = asserted_label(request);
  // P3 attributes are untethered from the record; grounded prompts follow the
  // class profile of whatever class the note asserts.
  const bool grounded = request.strategy != Strategy::P3;
  const double fid = config_.attribute_fidelity;
  const auto& prof = profile_of(label);
  auto all = [&](std::string_view attr) -> const std::vector<std::string>& {
    const auto* opts = vocab_.options(attr);
    if (!opts) throw BackendError("vocabulary lacks attribute \"" + std::string(attr) + "\"");
    return *opts;
  };

  std::ostringstream os;
  if (request.strategy == Strategy::M_P1 || request.strategy == Strategy::M_P2) {
    auto from_prompt = quoted_note(request.prompt);
    if (from_prompt && request.grounding && label == *request.grounding) {
      os << *from_prompt << ".";
    } else {
      os << template_sentence(label, std::nullopt, taxonomy_) << ".";
    }
  }

  auto sentence = [&](std::string_view attr, const std::vector<std::string>& values) {
    os << " " << capitalize(std::string(attr)) << ": " << join(values, ", ") << ".";
  };

  if (request.strategy == Strategy::M_P2) {
    sentence("lesion type", pick(rng, prof.lesion_type, all("lesion type"), 1, grounded, fid));
    sentence("color", pick(rng, prof.color, all("color"), 1 + rng.index(2), grounded, fid));
    sentence("border", pick(rng, prof.border, all("border"), 1, grounded, fid));
    sentence("symmetry", pick(rng, prof.symmetry, all("symmetry"), 1, grounded, fid));
    sentence("surface", pick(rng, prof.surface, kSurfaceOptions, 1, grounded, fid));
  } else {
    sentence("symmetry", pick(rng, prof.symmetry, all("symmetry"), 1, grounded, fid));
    sentence("border", pick(rng, prof.border, all("border"), 1, grounded, fid));
    sentence("color", pick(rng, prof.color, all("color"), 1 + rng.index(2), grounded, fid));
    sentence("dermoscopic structures",
             pick(rng, prof.structures, all("dermoscopic structures"), 1 + rng.index(2), grounded,
                  fid));
  }
  if (request.strategy == Strategy::P3) {
    os << " Proposed class: " << malignancy_name(taxonomy_.malignancy_of(label))
       << " skin lesion, specifically a " << label_name(label) << ".";
  }
  auto text = os.str();
  if (!text.empty() && text.front() == ' ') text.erase(0, 1);
  return text;
}

RemoteBackend::RemoteBackend(RemoteBackendConfig config) : config_(std::move(config)) {
  const auto& ep = config_.endpoint;
  const auto scheme = ep.find("://");
  if (scheme == std::string::npos) throw Error("remote endpoint needs a scheme: " + ep);
  const auto path_start = ep.find('/', scheme + 3);
  host_ = path_start == std::string::npos ? ep : ep.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : ep.substr(path_start);
}

std::string RemoteBackend::id() const {
  return config_.name.empty() ? config_.endpoint : config_.name;
}

std::string RemoteBackend::generate(const GenerationRequest& request) {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  ordered_json body;
  body["prompt"] = request.prompt;
  body["max_tokens"] = request.max_tokens;
  body["seed"] = request.seed;
  auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) throw BackendError("request to " + config_.endpoint + " failed: " +
                               httplib::to_string(res.error()));
  if (res->status != 200) {
    throw BackendError("backend returned HTTP " + std::to_string(res->status));
  }
  try {
    auto j = nlohmann::json::parse(res->body);
    auto text = j.at("text").get<std::string>();
    if (trim(text).empty()) throw BackendError("backend returned empty text");
    return text;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed backend response: ") + e.what());
  }
}

SynthesisResult synthesize(const Corpus& corpus, Strategy strategy, GenerationBackend& backend,
                           std::uint64_t seed, const SynthesisOptions& options) {
  const auto& vocab = options.vocab ? *options.vocab : default_vocabulary();
  SynthesisResult out;
  if (strategy == Strategy::M) {
    for (const auto& r : corpus.records()) out.notes.push_back(render_template(r, options.taxonomy));
  } else {
    if (backend.id() == "template") {
      throw Error("strategy " + std::string(strategy_code(strategy)) +
                  " needs a generation backend (mock or remote)");
    }
    for (const auto& r : corpus.records()) {
      GenerationRequest req;
      req.prompt = strategy == Strategy::P3 ? build_prompt(nullptr, strategy, vocab, options.taxonomy)
                                            : build_prompt(&r, strategy, vocab, options.taxonomy);
      req.max_tokens = options.max_tokens;
      req.seed = derive_seed(seed, std::string(strategy_code(strategy)) + "/" + r.id);
      req.strategy = strategy;
      req.grounding = r.label;

      std::string last_error;
      std::optional<std::string> text;
      for (int attempt = 0; attempt <= options.max_retries && !text; ++attempt) {
        try {
          text = backend.generate(req);
        } catch (const std::exception& e) {
          last_error = e.what();
        }
      }
      if (text) {
        ClinicalNote note;
        note.sample_id = r.id;
        note.text = std::move(*text);
        note.strategy = strategy;
        note.prompt = req.prompt;
        note.prompt_hash = prompt_hash(req.prompt);
        note.backend_id = backend.id();
        out.notes.push_back(std::move(note));
      } else {
        out.failures.push_back({r.id, strategy, backend.id(), last_error});
      }
    }
  }
  std::sort(out.notes.begin(), out.notes.end(),
            [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
  std::sort(out.failures.begin(), out.failures.end(),
            [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
  return out;
}

std::vector<Label> asserted_labels(std::string_view text) {
  const auto lower = to_lower(text);
  std::vector<Label> out;
  for (Label l : kAllLabels) {
    if (contains(lower, label_name(l))) out.push_back(l);
  }
  return out;
}

NoteAudit audit(const ClinicalNote& note, const SampleRecord& record,
                const AttributeVocabulary& vocab, const Tokenizer* tokenizer,
                const Taxonomy& taxonomy) {
  NoteAudit a;
  const auto lower = to_lower(note.text);

  for (const auto& sentence : split(lower, '.')) {
    const auto colon = sentence.find(':');
    if (colon == std::string::npos) continue;
    const auto key = trim(std::string_view(sentence).substr(0, colon));
    if (!vocab.options(key)) continue;
    auto values = std::string(sentence.substr(colon + 1));
    for (std::size_t p; (p = values.find(" and ")) != std::string::npos;) {
      values.replace(p, 5, ",");
    }
    for (const auto& v : split(values, ',')) {
      const auto option = trim(v);
      if (!option.empty() && !vocab.allows(key, option)) ++a.vocabulary_violations;
    }
  }

  for (Label l : asserted_labels(lower)) {
    if (l != record.label) ++a.metadata_contradictions;
  }
  const auto truth = malignancy_name(taxonomy.malignancy_of(record.label));
  for (auto m : {Malignancy::benign, Malignancy::malignant}) {
    const auto name = malignancy_name(m);
    if (name != truth && contains(lower, std::string(name) + " skin lesion")) {
      ++a.metadata_contradictions;
    }
  }

  if (tokenizer) a.token_length = tokenizer->encode(note.text).ids.size();
  return a;
}

std::string serialize_notes(const SynthesisResult& result) {
  std::string out;
  for (const auto& n : result.notes) {
    ordered_json j;
    j["sample_id"] = n.sample_id;
    j["strategy"] = strategy_code(n.strategy);
    j["text"] = n.text;
    j["backend_id"] = n.backend_id;
    j["prompt_hash"] = n.prompt_hash.empty() ? prompt_hash(n.prompt) : n.prompt_hash;
    out += j.dump();
    out += '\n';
  }
  for (const auto& f : result.failures) {
    ordered_json j;
    j["sample_id"] = f.sample_id;
    j["strategy"] = strategy_code(f.strategy);
    j["backend_id"] = f.backend_id;
    j["error"] = f.error;
    out += j.dump();
    out += '\n';
  }
  return out;
}

SynthesisResult parse_notes(std::string_view text) {
  SynthesisResult out;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto code = j.at("strategy").get<std::string>();
      auto strategy = parse_strategy(code);
      if (!strategy) throw Error("unknown strategy \"" + code + "\"");
      if (j.contains("error")) {
        out.failures.push_back({j.at("sample_id").get<std::string>(), *strategy,
                                j.value("backend_id", ""), j.at("error").get<std::string>()});
        continue;
      }
      ClinicalNote n;
      n.sample_id = j.at("sample_id").get<std::string>();
      n.strategy = *strategy;
      n.text = j.at("text").get<std::string>();
      n.backend_id = j.at("backend_id").get<std::string>();
      n.prompt_hash = j.at("prompt_hash").get<std::string>();
      if (trim(n.text).empty()) throw Error("empty note text");
      out.notes.push_back(std::move(n));
    } catch (const nlohmann::json::exception& e) {
      throw Error("notes line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("notes line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_notes(const SynthesisResult& result, const std::filesystem::path& path) {
  write_file(path, serialize_notes(result));
}

SynthesisResult load_notes(const std::filesystem::path& path) {
  return parse_notes(read_file(path));
}

std::map<std::string, const ClinicalNote*> index_notes(const std::vector<ClinicalNote>& notes) {
  std::map<std::string, const ClinicalNote*> out;
  for (const auto& n : notes) {
    if (!out.emplace(n.sample_id, &n).second) {
      throw Error("more than one note for sample \"" + n.sample_id + "\"");
    }
  }
  return out;
}

}  // namespace mmcl
