// Copyright (c) 2026 The shadowdiff Authors.
// All rights reserved.
//
// This software is licensed under the Apache License, Version 2.0 (the "License").
// You may not use this file except in compliance with the License. You may
// obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "shadowdiff/image_io.hpp"

#include "shadowdiff/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <string>

namespace shadowdiff {

namespace {

torch::Tensor mat_to_tensor(const cv::Mat& mat)
{
    cv::Mat contiguous = mat.isContinuous() ? mat : mat.clone();
    auto t = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, contiguous.channels()},
                              torch::kUInt8)
                 .clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

} // namespace

torch::Tensor read_rgb(const std::filesystem::path& path)
{
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw DataError("cannot read image " + path.string());
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return mat_to_tensor(rgb);
}

torch::Tensor read_gray(const std::filesystem::path& path)
{
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) {
        throw DataError("cannot read image " + path.string());
    }
    return mat_to_tensor(gray);
}

torch::Tensor quantize_8bit(const torch::Tensor& image)
{
    return image.clamp(0.0, 1.0).mul(255.0).round().div(255.0);
}

void write_image(const std::filesystem::path& path, const torch::Tensor& image)
{
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
        throw UsageError("write_image expects [1|3, H, W]");
    }
    auto bytes = image.detach()
                     .to(torch::kFloat64)
                     .clamp(0.0, 1.0)
                     .mul(255.0)
                     .round()
                     .to(torch::kUInt8)
                     .permute({1, 2, 0})
                     .contiguous();
    const int channels = static_cast<int>(bytes.size(2));
    cv::Mat mat(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)),
                channels == 3 ? CV_8UC3 : CV_8UC1, bytes.data_ptr<uint8_t>());
    cv::Mat out;
    if (channels == 3) {
        cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
    } else {
        out = mat;
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    if (!cv::imwrite(path.string(), out)) {
        throw DataError("cannot write image " + path.string());
    }
}

bool is_image_file(const std::filesystem::path& path)
{
    static const std::array<std::string, 7> kExtensions{".png", ".jpg", ".jpeg", ".bmp",
                                                        ".tif", ".tiff", ".ppm"};
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return std::find(kExtensions.begin(), kExtensions.end(), ext) != kExtensions.end();
}

} // namespace shadowdiff
