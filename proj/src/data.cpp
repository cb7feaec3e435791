#include "rashnet/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace rashnet {

namespace {

constexpr std::array<std::string_view, kFineLabelCount> kLabelNames{
    "bowens_disease", "chickenpox", "chigger_bites", "dermatofibroma", "eczema",   "enterovirus",
    "keratosis",      "measles",    "normal_skin",   "psoriasis",      "ringworm", "scabies",
};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

// Splits one CSV record. Quoted fields may contain commas; "" is a quote.
std::vector<std::string> split_csv(const std::string& line, const std::string& where) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"' && trim(cur).empty()) {
      quoted = true;
      was_quoted = true;
      cur.clear();
    } else if (ch == ',') {
      fields.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += ch;
    }
  }
  if (quoted) throw DataError(where + ": unterminated quoted field");
  fields.push_back(was_quoted ? cur : trim(cur));
  return fields;
}

std::string quote_csv(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

}  // namespace

std::string_view label_name(FineLabel label) {
  return kLabelNames.at(static_cast<std::size_t>(label));
}

std::optional<FineLabel> parse_label(std::string_view name) {
  for (std::size_t i = 0; i < kLabelNames.size(); ++i) {
    if (kLabelNames[i] == name) return static_cast<FineLabel>(i);
  }
  return std::nullopt;
}

std::size_t DatasetManifest::positives() const {
  return count(FineLabel::measles);
}

std::vector<int> DatasetManifest::binary_labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.binary());
  return out;
}

void DatasetManifest::recount() {
  counts.fill(0);
  for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.label)];
}

void DatasetManifest::add(std::string path, FineLabel label) {
  samples.push_back({std::move(path), label, static_cast<std::int64_t>(samples.size())});
  ++counts[static_cast<std::size_t>(label)];
}

DatasetManifest DatasetManifest::subset(const std::vector<std::size_t>& indices) const {
  DatasetManifest out;
  out.schema_version = schema_version;
  out.base_dir = base_dir;
  for (std::size_t i : indices) out.samples.push_back(samples.at(i));
  out.recount();
  return out;
}

DatasetManifest parse_manifest(std::istream& in, const std::string& origin,
                               std::filesystem::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::set<std::string> paths;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    auto fields = split_csv(line, where);
    if (!header_seen) {
      if (fields.size() != 2 || fields[0] != "path" || fields[1] != "label") {
        throw DataError(where + ": expected header 'path,label'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 2) {
      throw DataError(where + ": expected 2 fields, got " + std::to_string(fields.size()));
    }
    if (fields[0].empty()) throw DataError(where + ": empty path");
    auto label = parse_label(fields[1]);
    if (!label) throw DataError(where + ": unknown label '" + fields[1] + "'");
    if (!paths.insert(fields[0]).second) {
      throw DataError(where + ": duplicate path '" + fields[0] + "'");
    }
    m.add(fields[0], *label);
  }
  if (m.samples.empty()) throw DataError(origin + ": empty manifest");
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open manifest");
  return parse_manifest(in, path.string(), path.parent_path());
}

void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  out << "path,label\n";
  for (const auto& s : manifest.samples) out << quote_csv(s.path) << ',' << label_name(s.label) << '\n';
}

BalancedIndices oversample_indices(const std::vector<int>& labels,
                                   const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i : indices) by_class[labels.at(i) == 1 ? 1 : 0].push_back(i);
  const std::size_t pos = by_class[1].size(), neg = by_class[0].size();
  if (pos == 0 || neg == 0) {
    throw DataError("oversample: both classes need at least one sample (positives " +
                    std::to_string(pos) + ", negatives " + std::to_string(neg) + ")");
  }
  BalancedIndices r;
  r.indices = indices;
  const int minority = pos < neg ? 1 : 0;
  const auto& pool = by_class[minority];
  for (std::size_t have = pool.size(), j = 0; have + 1 < std::max(pos, neg); ++have, ++j) {
    r.indices.push_back(pool[j % pool.size()]);
    ++r.duplicates;
  }
  if (pool.size() == 1 && r.duplicates > 0) {
    r.warnings.push_back("oversample: single " + std::string(minority ? "positive" : "negative") +
                         " sample duplicated " + std::to_string(r.duplicates) + " times");
  }
  return r;
}

OversampleResult oversample(const DatasetManifest& manifest) {
  std::vector<std::size_t> all(manifest.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto balanced = oversample_indices(manifest.binary_labels(), all);
  OversampleResult r;
  r.manifest = manifest;
  for (std::size_t j = manifest.size(); j < balanced.indices.size(); ++j) {
    r.manifest.samples.push_back(manifest.samples[balanced.indices[j]]);
  }
  r.manifest.recount();
  r.duplicates = balanced.duplicates;
  r.warnings = std::move(balanced.warnings);
  return r;
}

std::vector<std::size_t> FoldPlan::training(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] != fold) out.push_back(i);
  }
  return out;
}

FoldPlan stratified_kfold(const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("stratified_kfold: k must be at least 2 (k=1 leaves no held-out data)");
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.validation.assign(static_cast<std::size_t>(k), {});
  plan.fold_of.assign(labels.size(), -1);

  std::mt19937_64 rng(seed);
  std::size_t next_fold = 0;
  for (int cls : {1, 0}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    if (members.size() < static_cast<std::size_t>(k)) {
      throw DataError("stratified_kfold: class " + std::string(cls ? "positive" : "negative") +
                      " has " + std::to_string(members.size()) + " samples, fewer than k=" +
                      std::to_string(k));
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t idx : members) {
      plan.fold_of[idx] = static_cast<int>(next_fold);
      plan.validation[next_fold].push_back(idx);
      next_fold = (next_fold + 1) % static_cast<std::size_t>(k);
    }
  }
  for (auto& fold : plan.validation) std::sort(fold.begin(), fold.end());
  return plan;
}

FoldPlan stratified_kfold(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  return stratified_kfold(manifest.binary_labels(), k, seed);
}

void write_fold_plan(std::ostream& out, const FoldPlan& plan, const DatasetManifest& manifest) {
  out << "sample_id,fold\n";
  for (std::size_t i = 0; i < plan.fold_of.size(); ++i) {
    out << manifest.samples.at(i).id << ',' << plan.fold_of[i] << '\n';
  }
}

TensorSource::TensorSource(std::vector<Tensor> images, std::vector<int> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
  if (images_.size() != labels_.size()) {
    throw std::invalid_argument("TensorSource: image and label counts differ");
  }
}

ManifestSource::ManifestSource(DatasetManifest manifest, PreprocessOptions options)
    : manifest_(std::move(manifest)), options_(options) {}

Tensor ManifestSource::image(std::size_t i) const {
  std::filesystem::path p = manifest_.samples.at(i).path;
  if (p.is_relative()) p = manifest_.base_dir / p;
  return preprocess(decode_image(p), options_);
}

}  // namespace rashnet
