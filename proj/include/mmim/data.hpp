#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmim/image.hpp"

namespace mmim {

enum class Eye { left, right };
enum class Modality { oct, ir };

std::string to_string(Eye e);
std::string to_string(Modality m);
Eye eye_from_string(const std::string& s);
Modality modality_from_string(const std::string& s);

/// One image of one modality, tied to (patient, eye, visit) for pairing.
/// label is an empty string, a decimal class id, or a 0/1 bit string for
/// multi-label tasks.
struct ManifestRecord {
  std::string patient_id;
  Eye eye = Eye::left;
  std::string visit_id;
  Modality modality = Modality::oct;
  std::string image_path;
  std::string label;

  bool has_label() const { return !label.empty(); }
  int class_label() const;  // throws when label is not a decimal class id
};

/// Tab-separated, one record per line, '#' comments. Fields:
/// patient_id, eye, visit_id, modality, image_path, label ('-' when absent).
std::vector<ManifestRecord> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path);
ManifestRecord parse_manifest_line(const std::string& line);
std::string format_manifest_record(const ManifestRecord& rec);

/// Throws when the (patient, eye, visit, modality, path) key repeats,
/// listing the offenders.
void validate_manifest(const std::vector<ManifestRecord>& records);

struct PairReport {
  std::vector<std::pair<ManifestRecord, ManifestRecord>> pairs;  // (oct, ir)
  std::vector<ManifestRecord> unpaired;
};

/// Pairs OCT and IR records captured for the same (patient, eye, visit).
/// Groups with several candidates match in lexicographic path order;
/// leftovers are reported unpaired.
PairReport build_pairs(const std::vector<ManifestRecord>& records);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct ManifestSplits {
  std::vector<ManifestRecord> train, val, test;
};

/// Patient-level stratified split: no patient spans splits, per-split class
/// counts stay within one patient of exact proportions, deterministic per
/// seed.
ManifestSplits stratified_split(const std::vector<ManifestRecord>& records, const SplitFractions& fractions,
                                uint64_t seed);

struct SynthConfig {
  size_t image_size = 32;
  size_t num_patients = 16;
  size_t visits_per_patient = 2;
  bool both_eyes = true;
  int num_classes = 2;
  double noise = 0.03;            // i.i.d. pixel noise
  double intensity_jitter = 0.0;  // per-image, per-modality brightness jitter
  uint64_t seed = 0;
};

/// Renders a paired synthetic corpus: per (patient, eye, visit) a shared
/// latent drives a layered-stripe OCT-like image and a radial/vessel IR-like
/// image; the class shifts mean brightness in both. Writes 8-bit PGM files
/// plus manifest.tsv under out_dir and returns the records.
std::vector<ManifestRecord> generate_paired(const SynthConfig& config, const std::string& out_dir);

/// In-memory renderers (deterministic per latent), exposed for tests.
Image render_oct_like(const SynthConfig& config, int cls, const std::vector<double>& latent, uint64_t noise_seed);
Image render_ir_like(const SynthConfig& config, int cls, const std::vector<double>& latent, uint64_t noise_seed);

/// 8-bit binary PGM (P5); 16-bit files are accepted on load and scaled by
/// their maxval. Values outside [0,1] clamp on save.
Image load_image(const std::string& path);
void save_image(const Image& image, const std::string& path);

}  // namespace mmim
