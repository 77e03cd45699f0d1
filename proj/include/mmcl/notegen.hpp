#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmcl/corpus.hpp"

namespace mmcl {

class Tokenizer;

/// Note-synthesis strategies. M fills the metadata template only; M_P1 and
/// M_P2 prompt a generator with the template note; P3 prompts without any
/// record metadata.
enum class Strategy : std::uint8_t { M = 0, M_P1 = 1, M_P2 = 2, P3 = 3 };

inline constexpr std::array<Strategy, 4> kAllStrategies = {Strategy::M, Strategy::M_P1,
                                                           Strategy::M_P2, Strategy::P3};

/// Machine name: "M", "M_P1", "M_P2", "P3".
std::string_view strategy_code(Strategy s);
/// Column header: "M", "M + P1", "M + P2", "P3".
std::string_view strategy_title(Strategy s);
/// Accepts codes, titles and "M+P1" spellings, case-insensitively.
std::optional<Strategy> parse_strategy(std::string_view text);

/// Attribute name -> ordered, lowercase option list.
class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;
  /// Lowercases every name/option; throws on an empty option set.
  explicit AttributeVocabulary(std::vector<std::pair<std::string, std::vector<std::string>>> attrs);

  const std::vector<std::pair<std::string, std::vector<std::string>>>& attributes() const {
    return attrs_;
  }
  /// nullptr when the attribute is unknown.
  const std::vector<std::string>* options(std::string_view attribute) const;
  bool allows(std::string_view attribute, std::string_view option) const;

 private:
  std::vector<std::pair<std::string, std::vector<std::string>>> attrs_;
};

/// symmetry, border, color, dermoscopic structures, lesion type.
const AttributeVocabulary& default_vocabulary();

/// Attributes requested by the option-constrained prompt (and P3).
inline constexpr std::array<std::string_view, 4> kConstrainedAttributes = {
    "symmetry", "border", "color", "dermoscopic structures"};
/// Attributes requested by the free-description prompt.
inline constexpr std::array<std::string_view, 4> kDescriptiveAttributes = {"lesion type", "color",
                                                                           "border", "symmetry"};

struct ClinicalNote {
  std::string sample_id;
  std::string text;
  Strategy strategy = Strategy::M;
  /// Full prompt; empty for M and for notes read back from disk.
  std::string prompt;
  /// First 16 hex digits of SHA-256(prompt).
  std::string prompt_hash;
  std::string backend_id;
};

std::string prompt_hash(std::string_view prompt);

/// "The image includes a <benign|malignant> skin lesion, specifically a
/// <class>" plus " (specifically a <subclass>)" when a subclass is known.
std::string template_sentence(Label label, const std::optional<std::string>& subclass,
                              const Taxonomy& taxonomy = {});

ClinicalNote render_template(const SampleRecord& record, const Taxonomy& taxonomy = {});

/// Prompt for a generator-backed strategy. `record` must be non-null for
/// M_P1/M_P2 and null for P3; M has no prompt.
std::string build_prompt(const SampleRecord* record, Strategy strategy,
                         const AttributeVocabulary& vocab = default_vocabulary(),
                         const Taxonomy& taxonomy = {});

struct GenerationRequest {
  std::string prompt;
  int max_tokens = 256;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::M_P1;
  /// Ground-truth class of the record. Only the mock reads it, to emulate a
  /// generator that looks at the image; remote backends never receive it.
  std::optional<Label> grounding;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  virtual std::string id() const = 0;
  virtual std::string generate(const GenerationRequest& request) = 0;
};

/// No-op backend; strategy M bypasses generation entirely.
class TemplateBackend final : public GenerationBackend {
 public:
  std::string id() const override { return "template"; }
  std::string generate(const GenerationRequest& request) override;
};

struct MockBackendConfig {
  /// Probability that the asserted class is replaced by a uniform draw over
  /// all five classes (so it still matches the truth 1/5 of the time).
  double corruption_rate = 0.0;
  /// Probability that a grounded attribute comes from the class profile
  /// rather than the full option list.
  double attribute_fidelity = 0.8;
};

/// Seeded grammar-based sampler. Output follows the constrained
/// "<attribute>: <options>." structure for every strategy. Grounded
/// strategies draw attributes from class profiles; P3 draws them uniformly.
class MockBackend final : public GenerationBackend {
 public:
  explicit MockBackend(MockBackendConfig config = {},
                       const AttributeVocabulary& vocab = default_vocabulary(),
                       Taxonomy taxonomy = {});
  std::string id() const override { return "mock"; }
  std::string generate(const GenerationRequest& request) override;

  const MockBackendConfig& config() const { return config_; }
  /// Asserted class the mock will use for a request; exposed for tests.
  Label asserted_label(const GenerationRequest& request) const;

 private:
  MockBackendConfig config_;
  AttributeVocabulary vocab_;
  Taxonomy taxonomy_;
};

struct RemoteBackendConfig {
  /// e.g. "http://127.0.0.1:8080/generate".
  std::string endpoint;
  std::chrono::milliseconds timeout{30000};
  std::string name;
};

/// POST {prompt, max_tokens, seed} -> {text}.
class RemoteBackend final : public GenerationBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig config);
  std::string id() const override;
  std::string generate(const GenerationRequest& request) override;

 private:
  RemoteBackendConfig config_;
  std::string host_;
  std::string path_;
};

struct SynthesisFailure {
  std::string sample_id;
  Strategy strategy = Strategy::M;
  std::string backend_id;
  std::string error;
};

struct SynthesisOptions {
  /// Retries after the first failed attempt, per record.
  int max_retries = 2;
  int max_tokens = 256;
  Taxonomy taxonomy;
  const AttributeVocabulary* vocab = nullptr;
};

struct SynthesisResult {
  /// Sorted by sample id.
  std::vector<ClinicalNote> notes;
  std::vector<SynthesisFailure> failures;
};

/// One note per record, or a failure entry when the backend keeps failing;
/// records are never dropped silently.
SynthesisResult synthesize(const Corpus& corpus, Strategy strategy, GenerationBackend& backend,
                           std::uint64_t seed, const SynthesisOptions& options = {});

struct NoteAudit {
  std::size_t vocabulary_violations = 0;
  std::size_t metadata_contradictions = 0;
  std::size_t token_length = 0;
};

/// Counts attribute values outside the vocabulary and class/malignancy
/// assertions that conflict with the record. token_length is filled when a
/// tokenizer is supplied.
NoteAudit audit(const ClinicalNote& note, const SampleRecord& record,
                const AttributeVocabulary& vocab = default_vocabulary(),
                const Tokenizer* tokenizer = nullptr, const Taxonomy& taxonomy = {});

/// Classes named anywhere in the text, in label order.
std::vector<Label> asserted_labels(std::string_view text);

// Notes file: JSON lines {sample_id, strategy, text, backend_id, prompt_hash};
// failures carry an "error" field instead of text.
std::string serialize_notes(const SynthesisResult& result);
SynthesisResult parse_notes(std::string_view text);
void save_notes(const SynthesisResult& result, const std::filesystem::path& path);
SynthesisResult load_notes(const std::filesystem::path& path);

/// sample id -> note, for a single strategy. Throws on duplicates.
std::map<std::string, const ClinicalNote*> index_notes(const std::vector<ClinicalNote>& notes);

}  // namespace mmcl
