#include "hallucheck/hs.hpp"

namespace hallucheck::hs {

// Rubric prompt sent with every scoring request. Frozen: any edit changes
// kRubricSha256 and fails build_prompt's self-check.
const std::string_view kRubricPrompt = R"PROMPT(You will receive three images for evaluation:
1. **Ground Truth (GT)**: The reference high-resolution image.
2. **Low-Resolution Input (LR)**: The degraded, low-resolution input image provided to an AI model.
3. **Super-Resolved Image (SR)**: The output high-resolution image generated by an AI super-resolution model based solely on the LR image.
**Task:**  
Evaluate the SR image for "hallucinations," which are imaginary details or content added by the model that are not present in the GT image.
#### Criteria for Evaluation:
- **Hallucinations** are newly added visual contents that significantly differ from the GT image. 
- Mere **lack of detail**, blurry textures, or lower image quality (due to severe damage in the LR image) should **not** be considered hallucinations. Such artifacts are understandable, given original input limitations.
- Focus specifically on added details that **change the semantic meaning** (new objects, significant alterations of scene elements) or generate **perceptually jarring inaccuracies** (e.g., incorrect facial features, unreadable or distorted text).
#### How to assign scores (1-5 scale):
- **1 (Significant Hallucinations):** Multiple severe hallucinations causing major semantic changes or perceptually disturbing artifacts, such as completely invented objects, critically incorrect text, or distorted faces.
- **2 (Considerable Hallucinations):** Noticeable hallucinations that notably alter semantics or significantly degrade perception (e.g., introducing partially incorrect objects, faces, or text).
- **3 (Mild Hallucinations):** Minor added contents, typically at the texture or detail level, slightly affecting semantic interpretation; perceptually noticeable but not severely disturbing.
- **4 (Minimal Hallucinations):** Very minor discrepancies at texture or detail level only perceptible upon careful inspection; negligible semantic or perceptual effect.
- **5 (Artifact-free):** SR image has no hallucinations; entirely faithful to GT image (aside from acceptable quality differences arising from LR limitations).
Your response must strictly adhere to the following JSON format and include brief but clear reasoning for your evaluation:
```json
{
  "score": <integer from 1 to 5>,
  "reasoning": "<Provide clear justification for the assigned rating, focusing primarily on the presence and severity of hallucinated details compared to the GT and LR images.>"
}
```
Output nothing else besides this JSON.    )PROMPT";

}  // namespace hallucheck::hs
