#include "mpgat/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mpgat/errors.hpp"

namespace mpgat {

using nlohmann::json;

int64_t parse_timestamp(const std::string& iso) {
  std::tm tm{};
  int y, mo, d, h, mi, s;
  char sep;
  if (std::sscanf(iso.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s) != 7 ||
      (sep != 'T' && sep != ' '))
    throw ValidationError("timestamp not ISO-8601 (YYYY-MM-DDTHH:MM:SS): " + iso);
  tm.tm_year = y - 1900;
  tm.tm_mon = mo - 1;
  tm.tm_mday = d;
  tm.tm_hour = h;
  tm.tm_min = mi;
  tm.tm_sec = s;
  const time_t t = timegm(&tm);
  if (t == static_cast<time_t>(-1)) throw ValidationError("timestamp out of range: " + iso);
  return static_cast<int64_t>(t);
}

std::string format_timestamp(int64_t epoch_seconds) {
  std::tm tm{};
  const time_t t = static_cast<time_t>(epoch_seconds);
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  return buf;
}

RawSeries ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("ingest_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("ingest_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "timestamp,node_id,count")
    throw ValidationError("ingest_csv: expected header 'timestamp,node_id,count', got '" + line +
                          "'");

  struct Row {
    int64_t ts;
    std::string node;
    double count;
  };
  std::vector<Row> rows;
  int64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw ValidationError("ingest_csv: line " + std::to_string(lineno) + ": need 3 fields");
    Row r;
    r.ts = parse_timestamp(line.substr(0, c1));
    r.node = line.substr(c1 + 1, c2 - c1 - 1);
    try {
      r.count = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw ValidationError("ingest_csv: line " + std::to_string(lineno) + ": bad count field");
    }
    if (!(r.count >= 0.0) || !std::isfinite(r.count))
      throw ValidationError("ingest_csv: line " + std::to_string(lineno) +
                            ": counts must be finite and nonnegative");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError("ingest_csv: no data rows in " + path);

  int64_t ts0 = rows[0].ts;
  int64_t ts_max = rows[0].ts;
  for (const Row& r : rows) {
    ts0 = std::min(ts0, r.ts);
    ts_max = std::max(ts_max, r.ts);
  }

  // The roster is fixed by the rows of the first time step, in file order.
  std::vector<std::string> roster;
  std::map<std::string, int64_t> node_index;
  for (const Row& r : rows)
    if (r.ts == ts0 && node_index.find(r.node) == node_index.end()) {
      node_index[r.node] = static_cast<int64_t>(roster.size());
      roster.push_back(r.node);
    }

  RawSeries series;
  series.n_nodes = static_cast<int64_t>(roster.size());
  series.start_timestamp = format_timestamp(ts0);
  if ((ts_max - ts0) % kStepSeconds != 0)
    throw ValidationError("ingest_csv: timestamp " + format_timestamp(ts_max) +
                          " is off the 5-minute grid");
  series.t_total = (ts_max - ts0) / kStepSeconds + 1;
  series.counts.assign(static_cast<size_t>(series.t_total * series.n_nodes),
                       std::numeric_limits<double>::quiet_NaN());

  for (const Row& r : rows) {
    auto it = node_index.find(r.node);
    if (it == node_index.end())
      throw ValidationError("ingest_csv: unknown node_id '" + r.node +
                            "' (not present at the first time step)");
    if ((r.ts - ts0) % kStepSeconds != 0)
      throw ValidationError("ingest_csv: timestamp " + format_timestamp(r.ts) +
                            " is off the 5-minute grid");
    const int64_t t = (r.ts - ts0) / kStepSeconds;
    double& cell = series.count(t, it->second);
    if (!std::isnan(cell))
      throw ValidationError("ingest_csv: duplicate row for " + format_timestamp(r.ts) + "," +
                            r.node);
    cell = r.count;
  }
  for (int64_t t = 0; t < series.t_total; ++t)
    for (int64_t n = 0; n < series.n_nodes; ++n)
      if (std::isnan(series.count(t, n)))
        throw ValidationError("ingest_csv: gap in grid, first missing entry at " +
                              format_timestamp(ts0 + t * kStepSeconds) + "," + roster[static_cast<size_t>(n)]);
  return series;
}

std::vector<double> moving_average(const RawSeries& series, int64_t t_m) {
  if (t_m < 1) throw std::invalid_argument("moving_average: window must be >= 1");
  const int64_t T = series.t_total, N = series.n_nodes;
  std::vector<double> out(static_cast<size_t>(T * N));
  // Each window is summed directly (t_m is small) so the result is exactly
  // the left-to-right sum of the window, with no incremental rounding drift.
  // Positions before a full window hold the partial mean; sample construction
  // never consumes them.
  for (int64_t t = 0; t < T; ++t) {
    const int64_t lo = std::max<int64_t>(0, t - t_m + 1);
    for (int64_t n = 0; n < N; ++n) {
      double sum = 0.0;
      for (int64_t i = lo; i <= t; ++i) sum += series.count(i, n);
      out[static_cast<size_t>(t * N + n)] = sum / static_cast<double>(t - lo + 1);
    }
  }
  return out;
}

std::vector<double> daily_feature(const RawSeries& series, int64_t t0, int64_t t_in) {
  if (t_in < 1) throw std::invalid_argument("daily_feature: t_in must be >= 1");
  const int64_t p = series.steps_per_day;
  if (t0 - (t_in - 1) * p < 0)
    throw std::invalid_argument("daily_feature: t0 " + std::to_string(t0) + " lacks " +
                                std::to_string(t_in - 1) + " prior days of history");
  if (t0 >= series.t_total) throw std::invalid_argument("daily_feature: t0 beyond series end");
  const int64_t N = series.n_nodes;
  std::vector<double> out(static_cast<size_t>(t_in * N));
  for (int64_t i = 0; i < t_in; ++i) {
    const int64_t t = t0 - (t_in - 1 - i) * p;
    for (int64_t n = 0; n < N; ++n) out[static_cast<size_t>(i * N + n)] = series.count(t, n);
  }
  return out;
}

std::vector<MultivariateSample> build_samples(const RawSeries& series, int64_t t_in,
                                              int64_t t_out) {
  if (t_in < 1 || t_out < 1)
    throw std::invalid_argument("build_samples: t_in and t_out must be >= 1");
  const int64_t N = series.n_nodes, p = series.steps_per_day;
  const std::vector<double> ma_short = moving_average(series, kMaShort);
  const std::vector<double> ma_long = moving_average(series, kMaLong);

  const int64_t earliest = std::max((t_in - 1) * p, t_in - 1 + kMaLong - 1);
  const int64_t latest = series.t_total - 1 - t_out;
  if (earliest > latest)
    throw ValidationError("build_samples: series too short for any sample (needs t0 in [" +
                          std::to_string(earliest) + "," + std::to_string(latest) + "])");

  std::vector<MultivariateSample> samples;
  samples.reserve(static_cast<size_t>(latest - earliest + 1));
  for (int64_t t0 = earliest; t0 <= latest; ++t0) {
    MultivariateSample s;
    s.t0 = t0;
    s.x = Tensor(Shape{kNumFeatures, N, t_in});
    s.y = Tensor(Shape{N, t_out});
    const std::vector<double> daily = daily_feature(series, t0, t_in);
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t k = 0; k < t_in; ++k) {
        const int64_t t = t0 - t_in + 1 + k;
        s.x.at({0, n, k}) = series.count(t, n);
        s.x.at({1, n, k}) = ma_short[static_cast<size_t>(t * N + n)];
        s.x.at({2, n, k}) = ma_long[static_cast<size_t>(t * N + n)];
        s.x.at({3, n, k}) = daily[static_cast<size_t>(k * N + n)];
      }
      for (int64_t h = 0; h < t_out; ++h) s.y.at({n, h}) = series.count(t0 + 1 + h, n);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

SplitResult split_samples(std::vector<MultivariateSample> samples, double r_train, double r_val,
                          double r_test) {
  if (std::fabs(r_train + r_val + r_test - 1.0) > 1e-9)
    throw std::invalid_argument("split_samples: ratios must sum to 1");
  std::sort(samples.begin(), samples.end(),
            [](const MultivariateSample& a, const MultivariateSample& b) { return a.t0 < b.t0; });
  const int64_t n = static_cast<int64_t>(samples.size());
  const int64_t n_train = static_cast<int64_t>(std::floor(static_cast<double>(n) * r_train));
  const int64_t n_val = static_cast<int64_t>(std::floor(static_cast<double>(n) * r_val));
  const int64_t n_test = n - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw ValidationError("split_samples: a partition is empty (" + std::to_string(n_train) + "/" +
                          std::to_string(n_val) + "/" + std::to_string(n_test) + " of " +
                          std::to_string(n) + ")");
  SplitResult r;
  r.train.assign(samples.begin(), samples.begin() + n_train);
  r.val.assign(samples.begin() + n_train, samples.begin() + n_train + n_val);
  r.test.assign(samples.begin() + n_train + n_val, samples.end());
  return r;
}

Normalizer fit_normalizer(const RawSeries& series, const std::vector<MultivariateSample>& train) {
  if (train.empty()) throw std::invalid_argument("fit_normalizer: no training samples");
  int64_t t_max = 0;
  for (const MultivariateSample& s : train) t_max = std::max(t_max, s.t0);
  const int64_t N = series.n_nodes;
  Normalizer norm;
  norm.mean.assign(static_cast<size_t>(N), 0.0);
  norm.std.assign(static_cast<size_t>(N), 0.0);
  const double T = static_cast<double>(t_max + 1);
  for (int64_t n = 0; n < N; ++n) {
    double sum = 0;
    for (int64_t t = 0; t <= t_max; ++t) sum += series.count(t, n);
    const double mean = sum / T;
    double sq = 0;
    for (int64_t t = 0; t <= t_max; ++t) {
      const double d = series.count(t, n) - mean;
      sq += d * d;
    }
    const double sd = std::sqrt(sq / T);
    if (!(sd > 0.0))
      throw ValidationError("fit_normalizer: node " + std::to_string(n) +
                            " has zero variance on the training portion");
    norm.mean[static_cast<size_t>(n)] = mean;
    norm.std[static_cast<size_t>(n)] = sd;
  }
  return norm;
}

double Normalizer::normalize_value(int64_t node, double v) const {
  return (v - mean[static_cast<size_t>(node)]) / std[static_cast<size_t>(node)];
}

double Normalizer::denormalize_value(int64_t node, double v) const {
  return v * std[static_cast<size_t>(node)] + mean[static_cast<size_t>(node)];
}

namespace {

// Applies fn per element where the node index is the second-to-last axis.
Tensor transform_node_major(const Tensor& x, const Normalizer& norm, bool forward) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("normalizer: tensor must have [.., N, T] layout");
  const int64_t T = s[s.size() - 1];
  const int64_t N = s[s.size() - 2];
  if (N != static_cast<int64_t>(norm.mean.size()))
    throw std::invalid_argument("normalizer: node axis " + std::to_string(N) +
                                " != fitted node count " + std::to_string(norm.mean.size()));
  std::vector<double> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) {
    const int64_t node = (static_cast<int64_t>(i) / T) % N;
    out[i] = forward ? norm.normalize_value(node, out[i]) : norm.denormalize_value(node, out[i]);
  }
  return Tensor(s, std::move(out));
}

}  // namespace

Tensor Normalizer::normalize_x(const Tensor& x) const {
  if (x.rank() != 3 && x.rank() != 4)
    throw std::invalid_argument("normalize_x: expected [F,N,T] or [B,F,N,T]");
  return transform_node_major(x, *this, true);
}

Tensor Normalizer::normalize_y(const Tensor& y) const {
  if (y.rank() != 2 && y.rank() != 3)
    throw std::invalid_argument("normalize_y: expected [N,T] or [B,N,T]");
  return transform_node_major(y, *this, true);
}

Tensor Normalizer::denormalize_y(const Tensor& y) const {
  if (y.rank() != 2 && y.rank() != 3)
    throw std::invalid_argument("denormalize_y: expected [N,T] or [B,N,T]");
  return transform_node_major(y, *this, false);
}

RawSeries synth_generate(int64_t n_nodes, int64_t days, double peak_ratio, double noise_level,
                         uint64_t seed) {
  if (n_nodes < 1) throw std::invalid_argument("synth_generate: need at least one node");
  if (days < 2) throw std::invalid_argument("synth_generate: need at least two days");
  if (!(peak_ratio > 1.0)) throw std::invalid_argument("synth_generate: peak_ratio must exceed 1");
  if (noise_level < 0.0) throw std::invalid_argument("synth_generate: noise_level must be >= 0");

  const int64_t p = kStepsPerDay;
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> kappa_dist(2.0, 3.0);
  std::uniform_real_distribution<double> phase_dist(0.45, 0.65);
  std::uniform_real_distribution<double> floor_dist(2.0, 5.0);

  // Smooth periodic bump per node; coupling adds the upstream node's profile
  // two steps delayed, so the chain 0 -> 1 -> ... carries lagged structure.
  std::vector<double> kappa(static_cast<size_t>(n_nodes));
  std::vector<double> phase(static_cast<size_t>(n_nodes));
  std::vector<double> lo(static_cast<size_t>(n_nodes));
  for (int64_t n = 0; n < n_nodes; ++n) {
    kappa[static_cast<size_t>(n)] = kappa_dist(gen);
    phase[static_cast<size_t>(n)] = phase_dist(gen) * static_cast<double>(p);
    lo[static_cast<size_t>(n)] = floor_dist(gen);
  }
  constexpr double kCoupling = 0.6;
  constexpr int64_t kLag = 2;
  const double two_pi = 2.0 * std::acos(-1.0);

  auto base = [&](int64_t n, int64_t u) {
    const double c = std::cos(two_pi * (static_cast<double>(u) - phase[static_cast<size_t>(n)]) /
                              static_cast<double>(p));
    return std::exp(kappa[static_cast<size_t>(n)] * c);
  };

  std::vector<std::vector<double>> profile(static_cast<size_t>(n_nodes),
                                           std::vector<double>(static_cast<size_t>(p)));
  for (int64_t n = 0; n < n_nodes; ++n) {
    for (int64_t u = 0; u < p; ++u) {
      double v = base(n, u);
      if (n > 0) v += kCoupling * base(n - 1, ((u - kLag) % p + p) % p);
      profile[static_cast<size_t>(n)][static_cast<size_t>(u)] = v;
    }
    // Affine map onto [lo, lo*peak_ratio] makes the daily max/min ratio exact.
    auto& prof = profile[static_cast<size_t>(n)];
    const auto [mn_it, mx_it] = std::minmax_element(prof.begin(), prof.end());
    const double mn = *mn_it, mx = *mx_it;
    const double lo_n = lo[static_cast<size_t>(n)];
    const double hi_n = lo_n * peak_ratio;
    for (double& v : prof) v = lo_n + (hi_n - lo_n) * (v - mn) / (mx - mn);
  }

  RawSeries series;
  series.n_nodes = n_nodes;
  series.t_total = days * p;
  series.start_timestamp = "2020-01-01T00:00:00";
  series.counts.resize(static_cast<size_t>(series.t_total * n_nodes));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int64_t t = 0; t < series.t_total; ++t)
    for (int64_t n = 0; n < n_nodes; ++n) {
      double eps = noise_level > 0.0 ? noise(gen) * noise_level : 0.0;
      eps = std::max(eps, -0.9);
      series.count(t, n) = profile[static_cast<size_t>(n)][static_cast<size_t>(t % p)] * (1.0 + eps);
    }
  return series;
}

void write_series_csv(const RawSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_series_csv: cannot write " + path);
  out << "timestamp,node_id,count\n";
  const int64_t ts0 = parse_timestamp(series.start_timestamp);
  char buf[64];
  for (int64_t t = 0; t < series.t_total; ++t) {
    const std::string ts = format_timestamp(ts0 + t * kStepSeconds);
    for (int64_t n = 0; n < series.n_nodes; ++n) {
      std::snprintf(buf, sizeof(buf), "%.17g", series.count(t, n));
      out << ts << ",n" << n << "," << buf << "\n";
    }
  }
}

PreparedDataset prepare_dataset(const RawSeries& series, int64_t t_in, int64_t t_out) {
  PreparedDataset ds;
  ds.series = series;
  ds.t_in = t_in;
  ds.t_out = t_out;
  ds.splits = split_samples(build_samples(series, t_in, t_out), 0.7, 0.1, 0.2);
  ds.normalizer = fit_normalizer(series, ds.splits.train);
  return ds;
}

namespace {
constexpr char kCacheMagic[] = "MPGATCACHE1\n";
}

void save_cache(const PreparedDataset& ds, const std::string& path) {
  json header;
  header["version"] = 1;
  header["t_in"] = ds.t_in;
  header["t_out"] = ds.t_out;
  header["n_nodes"] = ds.series.n_nodes;
  header["steps_per_day"] = ds.series.steps_per_day;
  header["t_total"] = ds.series.t_total;
  header["start_timestamp"] = ds.series.start_timestamp;
  header["feature_order"] = {"X_q", "X_ma5", "X_ma20", "X_d"};
  header["normalizer"] = {{"mean", ds.normalizer.mean}, {"std", ds.normalizer.std}};
  header["split_ratios"] = {0.7, 0.1, 0.2};
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_cache: cannot write " + path);
  out.write(kCacheMagic, sizeof(kCacheMagic) - 1);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  out.write(reinterpret_cast<const char*>(ds.series.counts.data()),
            static_cast<std::streamsize>(ds.series.counts.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_cache: write failure on " + path);
}

PreparedDataset load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("load_cache: cannot open " + path);
  char magic[sizeof(kCacheMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw ValidationError("load_cache: " + path + " is not a dataset cache (bad magic)");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30)) throw ValidationError("load_cache: corrupt header length");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ValidationError("load_cache: truncated header");
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("load_cache: header parse failure: ") + e.what());
  }
  if (header.at("version").get<int>() != 1)
    throw ValidationError("load_cache: unsupported cache version");

  PreparedDataset ds;
  ds.t_in = header.at("t_in").get<int64_t>();
  ds.t_out = header.at("t_out").get<int64_t>();
  ds.series.n_nodes = header.at("n_nodes").get<int64_t>();
  ds.series.steps_per_day = header.at("steps_per_day").get<int64_t>();
  ds.series.t_total = header.at("t_total").get<int64_t>();
  ds.series.start_timestamp = header.at("start_timestamp").get<std::string>();
  ds.series.counts.resize(static_cast<size_t>(ds.series.t_total * ds.series.n_nodes));
  in.read(reinterpret_cast<char*>(ds.series.counts.data()),
          static_cast<std::streamsize>(ds.series.counts.size() * sizeof(double)));
  if (!in) throw ValidationError("load_cache: truncated counts block");

  const auto ratios = header.at("split_ratios").get<std::vector<double>>();
  ds.splits = split_samples(build_samples(ds.series, ds.t_in, ds.t_out), ratios.at(0), ratios.at(1),
                            ratios.at(2));
  ds.normalizer.mean = header.at("normalizer").at("mean").get<std::vector<double>>();
  ds.normalizer.std = header.at("normalizer").at("std").get<std::vector<double>>();
  return ds;
}

}  // namespace mpgat
