#include "mmim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mmim/rng.hpp"

namespace fs = std::filesystem;

namespace mmim {

std::string to_string(Eye e) { return e == Eye::left ? "left" : "right"; }
std::string to_string(Modality m) { return m == Modality::oct ? "oct" : "ir"; }

Eye eye_from_string(const std::string& s) {
  if (s == "left") return Eye::left;
  if (s == "right") return Eye::right;
  throw std::invalid_argument("unknown eye: " + s);
}

Modality modality_from_string(const std::string& s) {
  if (s == "oct") return Modality::oct;
  if (s == "ir") return Modality::ir;
  throw std::invalid_argument("unknown modality: " + s);
}

int ManifestRecord::class_label() const {
  if (label.empty()) throw std::invalid_argument("record has no label: " + image_path);
  size_t pos = 0;
  const int value = std::stoi(label, &pos);
  if (pos != label.size() || value < 0) throw std::invalid_argument("not a class label: " + label);
  return value;
}

std::string format_manifest_record(const ManifestRecord& rec) {
  std::ostringstream os;
  os << rec.patient_id << '\t' << to_string(rec.eye) << '\t' << rec.visit_id << '\t' << to_string(rec.modality)
     << '\t' << rec.image_path << '\t' << (rec.label.empty() ? "-" : rec.label);
  return os.str();
}

ManifestRecord parse_manifest_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, '\t')) fields.push_back(field);
  if (fields.size() != 6) {
    throw std::invalid_argument("manifest line needs 6 tab-separated fields, got " +
                                std::to_string(fields.size()) + ": " + line);
  }
  ManifestRecord rec;
  rec.patient_id = fields[0];
  rec.eye = eye_from_string(fields[1]);
  rec.visit_id = fields[2];
  rec.modality = modality_from_string(fields[3]);
  rec.image_path = fields[4];
  rec.label = fields[5] == "-" ? "" : fields[5];
  if (rec.patient_id.empty() || rec.visit_id.empty() || rec.image_path.empty()) {
    throw std::invalid_argument("manifest line has empty key fields: " + line);
  }
  return rec;
}

std::vector<ManifestRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    records.push_back(parse_manifest_line(line));
  }
  return records;
}

void save_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << "# patient_id\teye\tvisit_id\tmodality\timage_path\tlabel\n";
  for (const auto& rec : records) out << format_manifest_record(rec) << '\n';
  if (!out) throw std::runtime_error("failed writing manifest: " + path);
}

namespace {

std::string record_key(const ManifestRecord& r) {
  return r.patient_id + "\t" + to_string(r.eye) + "\t" + r.visit_id + "\t" + to_string(r.modality) + "\t" +
         r.image_path;
}

std::string group_key(const ManifestRecord& r) {
  return r.patient_id + "\t" + to_string(r.eye) + "\t" + r.visit_id;
}

}  // namespace

void validate_manifest(const std::vector<ManifestRecord>& records) {
  std::map<std::string, size_t> seen;
  std::vector<std::string> offenders;
  for (const auto& r : records) {
    auto [it, inserted] = seen.emplace(record_key(r), 1);
    if (!inserted) offenders.push_back(record_key(r));
  }
  if (!offenders.empty()) {
    std::string msg = "duplicate manifest keys:";
    for (const auto& k : offenders) msg += "\n  " + k;
    throw std::invalid_argument(msg);
  }
}

PairReport build_pairs(const std::vector<ManifestRecord>& records) {
  validate_manifest(records);
  std::map<std::string, std::pair<std::vector<ManifestRecord>, std::vector<ManifestRecord>>> groups;
  for (const auto& r : records) {
    auto& g = groups[group_key(r)];
    (r.modality == Modality::oct ? g.first : g.second).push_back(r);
  }
  PairReport report;
  for (auto& [key, g] : groups) {
    auto by_path = [](const ManifestRecord& a, const ManifestRecord& b) { return a.image_path < b.image_path; };
    std::sort(g.first.begin(), g.first.end(), by_path);
    std::sort(g.second.begin(), g.second.end(), by_path);
    const size_t n = std::min(g.first.size(), g.second.size());
    for (size_t i = 0; i < n; ++i) report.pairs.emplace_back(g.first[i], g.second[i]);
    for (size_t i = n; i < g.first.size(); ++i) report.unpaired.push_back(g.first[i]);
    for (size_t i = n; i < g.second.size(); ++i) report.unpaired.push_back(g.second[i]);
  }
  return report;
}

ManifestSplits stratified_split(const std::vector<ManifestRecord>& records, const SplitFractions& fractions,
                                uint64_t seed) {
  const double frac[3] = {fractions.train, fractions.val, fractions.test};
  double total = 0.0;
  for (double f : frac) {
    if (f < 0.0) throw std::invalid_argument("stratified_split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("stratified_split: fractions must sum to 1");

  // patient -> class (first labelled record; unlabelled manifests stratify
  // as a single class)
  std::map<std::string, int> patient_class;
  std::map<std::string, std::vector<size_t>> patient_records;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    patient_records[r.patient_id].push_back(i);
    if (!patient_class.count(r.patient_id)) {
      patient_class[r.patient_id] = r.has_label() ? r.class_label() : 0;
    }
  }
  size_t active_splits = 0;
  for (double f : frac) active_splits += f > 0.0;
  if (patient_records.size() < active_splits) {
    throw std::invalid_argument("stratified_split: only " + std::to_string(patient_records.size()) +
                                " patients for " + std::to_string(active_splits) + " splits");
  }

  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [pid, cls] : patient_class) by_class[cls].push_back(pid);

  const double n_total = static_cast<double>(patient_records.size());
  size_t assigned[3] = {0, 0, 0};
  std::map<std::string, int> patient_split;
  for (auto& [cls, patients] : by_class) {
    std::sort(patients.begin(), patients.end());
    Rng rng(mix_seed(seed, static_cast<uint64_t>(cls)));
    rng.shuffle(patients);

    const double n_class = static_cast<double>(patients.size());
    size_t base[3];
    double remainder[3];
    size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double quota = frac[s] * n_class;
      base[s] = static_cast<size_t>(std::floor(quota + 1e-12));
      remainder[s] = quota - static_cast<double>(base[s]);
      used += base[s];
    }
    size_t leftover = patients.size() - used;
    // Assign leftovers by largest remainder, breaking ties toward the split
    // furthest below its global quota so small splits still fill up across
    // classes.
    std::vector<int> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
      const double da = frac[a] * n_total - static_cast<double>(assigned[a] + base[a]);
      const double db = frac[b] * n_total - static_cast<double>(assigned[b] + base[b]);
      if (da != db) return da > db;
      return a < b;
    });
    size_t counts[3] = {base[0], base[1], base[2]};
    for (size_t i = 0; i < leftover; ++i) counts[order[i % 3]] += 1;

    size_t cursor = 0;
    for (int s = 0; s < 3; ++s) {
      for (size_t i = 0; i < counts[s]; ++i) patient_split[patients[cursor++]] = s;
      assigned[s] += counts[s];
    }
  }

  ManifestSplits splits;
  for (const auto& r : records) {
    switch (patient_split.at(r.patient_id)) {
      case 0: splits.train.push_back(r); break;
      case 1: splits.val.push_back(r); break;
      default: splits.test.push_back(r); break;
    }
  }
  return splits;
}

// ---- synthetic generator ----------------------------------------------------

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

double class_base(int cls, int num_classes) {
  if (num_classes <= 1) return 0.45;
  return 0.25 + 0.35 * static_cast<double>(cls) / static_cast<double>(num_classes - 1);
}

}  // namespace

Image render_oct_like(const SynthConfig& config, int cls, const std::vector<double>& latent,
                      uint64_t noise_seed) {
  const size_t n = config.image_size;
  Image img(1, n, n);
  Rng noise(noise_seed);
  const double base = class_base(cls, config.num_classes) + config.intensity_jitter * latent[4];
  const double contrast = 0.8 + 0.2 / (1.0 + std::exp(-latent[3]));
  const double dn = static_cast<double>(n);
  // three retina-like bands whose centers ride on the shared latent
  double centers[3], widths[3], amps[3];
  for (int b = 0; b < 3; ++b) {
    centers[b] = dn * (0.2 + 0.25 * b + 0.08 * std::tanh(latent[0] + 0.7 * b));
    widths[b] = dn * (0.04 + 0.02 / (1.0 + std::exp(-latent[1])));
    amps[b] = contrast * (0.28 - 0.06 * b);
  }
  for (size_t y = 0; y < n; ++y) {
    for (size_t x = 0; x < n; ++x) {
      double v = base - 0.15;
      for (int b = 0; b < 3; ++b) {
        const double d = (static_cast<double>(y) - centers[b]) / widths[b];
        v += amps[b] * std::exp(-0.5 * d * d);
      }
      v += 0.05 * std::sin(2.0 * M_PI * static_cast<double>(x) / dn * (1.0 + 0.5 * latent[2]));
      v += config.noise * noise.normal();
      img.at(0, y, x) = clamp01(v);
    }
  }
  return img;
}

Image render_ir_like(const SynthConfig& config, int cls, const std::vector<double>& latent,
                     uint64_t noise_seed) {
  const size_t n = config.image_size;
  Image img(1, n, n);
  Rng noise(noise_seed);
  const double base = class_base(cls, config.num_classes) + config.intensity_jitter * latent[5];
  const double contrast = 0.8 + 0.2 / (1.0 + std::exp(-latent[3]));
  const double dn = static_cast<double>(n);
  const double cx = dn * (0.5 + 0.15 * std::tanh(latent[0]));
  const double cy = dn * (0.5 + 0.15 * std::tanh(latent[1]));
  const double disc = dn * 0.35;
  for (size_t y = 0; y < n; ++y) {
    for (size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double r2 = dx * dx + dy * dy;
      double v = base - 0.1 + contrast * 0.25 * std::exp(-r2 / (2.0 * disc * disc));
      // vessel-like dark curves radiating with latent-driven phase
      for (int k = 0; k < 3; ++k) {
        const double phase = latent[2] + 2.1 * k;
        const double curve =
            cy + dn * 0.25 * std::sin(2.0 * M_PI * static_cast<double>(x) / dn + phase) * (0.4 + 0.2 * k);
        const double d = (static_cast<double>(y) - curve) / (0.02 * dn + 1.0);
        v -= 0.18 * contrast * std::exp(-0.5 * d * d);
      }
      v += config.noise * noise.normal();
      img.at(0, y, x) = clamp01(v);
    }
  }
  return img;
}

std::vector<ManifestRecord> generate_paired(const SynthConfig& config, const std::string& out_dir) {
  if (config.image_size == 0 || config.num_patients == 0 || config.visits_per_patient == 0 ||
      config.num_classes <= 0) {
    throw std::invalid_argument("generate_paired: sizes and counts must be positive");
  }
  if (config.image_size % 8 != 0) {
    std::fprintf(stderr, "warning: image size %zu not divisible by the default patch size 8\n",
                 config.image_size);
  }
  fs::create_directories(out_dir);
  std::vector<ManifestRecord> records;
  const std::vector<Eye> eyes =
      config.both_eyes ? std::vector<Eye>{Eye::left, Eye::right} : std::vector<Eye>{Eye::left};
  for (size_t p = 0; p < config.num_patients; ++p) {
    const int cls = static_cast<int>(p) % config.num_classes;
    char pid[16];
    std::snprintf(pid, sizeof(pid), "P%04zu", p);
    for (size_t e = 0; e < eyes.size(); ++e) {
      for (size_t v = 0; v < config.visits_per_patient; ++v) {
        Rng lat_rng(mix_seed(config.seed, p, e, v));
        std::vector<double> latent(6);
        for (double& z : latent) z = lat_rng.normal();
        const uint64_t oct_noise = mix_seed(config.seed ^ 0xA5A5A5A5ULL, p, e, v);
        const uint64_t ir_noise = mix_seed(config.seed ^ 0x5A5A5A5AULL, p, e, v);
        Image oct = render_oct_like(config, cls, latent, oct_noise);
        Image ir = render_ir_like(config, cls, latent, ir_noise);

        const std::string stem =
            std::string(pid) + "_" + to_string(eyes[e]) + "_V" + std::to_string(v);
        ManifestRecord oct_rec{pid, eyes[e], "V" + std::to_string(v), Modality::oct,
                               (fs::path(out_dir) / (stem + "_oct.pgm")).string(), std::to_string(cls)};
        ManifestRecord ir_rec{pid, eyes[e], "V" + std::to_string(v), Modality::ir,
                              (fs::path(out_dir) / (stem + "_ir.pgm")).string(), std::to_string(cls)};
        save_image(oct, oct_rec.image_path);
        save_image(ir, ir_rec.image_path);
        records.push_back(oct_rec);
        records.push_back(ir_rec);
      }
    }
  }
  save_manifest(records, (fs::path(out_dir) / "manifest.tsv").string());
  return records;
}

// ---- image I/O ------------------------------------------------------------

namespace {

int read_pgm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  if (!in || value < 0) throw std::runtime_error("malformed PGM header: " + path);
  return value;
}

}  // namespace

Image load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') {
    throw std::runtime_error("unsupported image format (want binary PGM 'P5'): " + path);
  }
  const int width = read_pgm_token(in, path);
  const int height = read_pgm_token(in, path);
  const int maxval = read_pgm_token(in, path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    throw std::runtime_error("malformed PGM header: " + path);
  }
  in.get();  // single whitespace after maxval
  Image img(1, static_cast<size_t>(height), static_cast<size_t>(width));
  const size_t n = img.size();
  if (maxval < 256) {
    std::vector<unsigned char> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!in) throw std::runtime_error("truncated PGM payload: " + path);
    for (size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<double>(buf[i]) / static_cast<double>(maxval);
  } else {
    // 16-bit PGM stores big-endian sample pairs
    std::vector<unsigned char> buf(2 * n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(2 * n));
    if (!in) throw std::runtime_error("truncated PGM payload: " + path);
    for (size_t i = 0; i < n; ++i) {
      const unsigned value = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];
      img.pixels[i] = static_cast<double>(value) / static_cast<double>(maxval);
    }
  }
  return img;
}

void save_image(const Image& image, const std::string& path) {
  if (image.channels != 1) {
    throw std::invalid_argument("save_image: PGM supports 1 channel, got " + std::to_string(image.channels));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P5\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> buf(image.size());
  for (size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<unsigned char>(std::lround(clamp01(image.pixels[i]) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing image: " + path);
}

}  // namespace mmim
